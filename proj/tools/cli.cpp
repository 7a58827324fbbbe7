#include "cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ki67/augment.hpp"
#include "ki67/dataset.hpp"
#include "ki67/detector.hpp"
#include "ki67/error.hpp"
#include "ki67/eval.hpp"
#include "ki67/fixture.hpp"
#include "ki67/reporting.hpp"
#include "ki67/review.hpp"
#include "ki67/review_http.hpp"
#include "ki67/scoring.hpp"

namespace ki67::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Thrown for bad flag combinations detected after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc | std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + p.string());
  out << text;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedDocument, p.string() + ": " + e.what());
  }
}

struct PredictionFlags {
  std::string path;
  std::string label;
  bool post_nms = false;
  bool lenient = false;
};

void add_prediction_flags(CLI::App* cmd, PredictionFlags& f) {
  cmd->add_option("--predictions", f.path, "Prediction JSONL file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--label", f.label, "Run label (defaults to the file stem)");
  cmd->add_flag("--post-nms", f.post_nms, "Predictions were already suppressed; only filter by confidence");
  cmd->add_flag("--lenient", f.lenient, "Skip malformed prediction lines instead of failing");
}

PredictionSet load_prediction_set(const PredictionFlags& f, const DatasetManifest& m, std::ostream& err) {
  PredictionParse parsed = load_predictions(f.path);
  for (const auto& e : parsed.errors) {
    err << f.path << ":" << e.line << ": " << to_string(e.code) << ": " << e.message << '\n';
  }
  if (!parsed.errors.empty() && !f.lenient) {
    throw Error(ErrorCode::MalformedLine, std::to_string(parsed.errors.size()) + " malformed prediction line(s)");
  }
  if (!f.label.empty()) parsed.set.run_label = f.label;
  parsed.set.post_nms = f.post_nms;
  const auto missing = unresolved_images(parsed.set, m);
  if (!missing.empty()) {
    throw Error(ErrorCode::UnknownImage, "predictions reference " + std::to_string(missing.size()) +
                                             " image(s) not in the manifest, e.g. " + missing.front());
  }
  return std::move(parsed.set);
}

void check_unit(const char* name, double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw UsageError(std::string(name) + " must lie in [0,1]");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Ki-67 quantification toolkit: dataset handling, detection evaluation and scoring", "ki67"};
  app.set_config("--config", "", "Read option defaults from an INI/TOML file; flags override it");
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the effective configuration and exit");
  app.require_subcommand(1);

  // ingest
  std::string images_dir, annotations_dir, ingest_out, format = "rect-json";
  std::vector<std::string> label_overrides;
  auto* ingest = app.add_subcommand("ingest", "Build a manifest from images and annotation files");
  ingest->add_option("--images", images_dir, "Image directory (one subdirectory per case)")->required();
  ingest->add_option("--annotations", annotations_dir, "Annotation directory")->required();
  ingest->add_option("--format", format, "Annotation format")->check(CLI::IsMember({"rect-json", "yolo"}));
  ingest->add_option("--label-map", label_overrides, "Extra label mapping LABEL=CLASS_ID (repeatable)");
  ingest->add_option("--out", ingest_out, "Output manifest")->required();

  // validate
  std::string manifest_path;
  auto* validate = app.add_subcommand("validate", "Check a manifest for structural problems");
  validate->add_option("--manifest", manifest_path, "Manifest file")->required()->check(CLI::ExistingFile);

  // split
  SplitSpec split_spec;
  std::string counts_text, split_out;
  auto* split = app.add_subcommand("split", "Assign train/val/test splits");
  split->add_option("--manifest", manifest_path, "Manifest file")->required()->check(CLI::ExistingFile);
  split->add_option("--train", split_spec.fractions[0], "Train fraction")->capture_default_str();
  split->add_option("--val", split_spec.fractions[1], "Validation fraction")->capture_default_str();
  split->add_option("--test", split_spec.fractions[2], "Test fraction")->capture_default_str();
  split->add_option("--counts", counts_text, "Explicit unit counts TRAIN,VAL,TEST");
  split->add_option("--seed", split_spec.seed, "Shuffle seed")->capture_default_str();
  split->add_flag("--by-case", split_spec.group_by_case, "Keep all images of a case in one split");
  split->add_flag("--pool", split_spec.pool_augmented,
                  "Split augmented records individually (reproduces post-augmentation splitting; may leak)");
  split->add_flag("--overwrite", split_spec.overwrite, "Replace an existing split");
  split->add_option("--out", split_out, "Output manifest (default: rewrite --manifest)");

  // augment
  std::size_t target = 0;
  std::uint64_t aug_seed = 0;
  std::string aug_dir, aug_out, plan_in;
  AugmentOptions aug_opts;
  bool aug_overwrite = false;
  auto* augment = app.add_subcommand("augment", "Expand the dataset with annotation-preserving transforms");
  augment->add_option("--manifest", manifest_path, "Manifest file")->required()->check(CLI::ExistingFile);
  augment->add_option("--target", target, "Total image count after augmentation");
  augment->add_option("--seed", aug_seed, "Plan seed")->capture_default_str();
  augment->add_option("--plan", plan_in, "Execute an existing plan JSON instead of sampling one");
  augment->add_option("--out-dir", aug_dir, "Directory for augmented images and plan.json")->required();
  augment->add_option("--out", aug_out, "Output manifest (default: OUT_DIR/manifest.json)");
  augment->add_option("--min-retained", aug_opts.min_retained_area, "Crop box retention area share")
      ->capture_default_str();
  augment->add_flag("--additive-brightness", aug_opts.additive_brightness, "Brightness adds delta*255");
  augment->add_flag("--overwrite", aug_overwrite, "Replace records whose ids already exist");

  // evaluate
  PredictionFlags pred;
  std::string eval_split, eval_out, pr_dir;
  double iou_thresh = kDefaultMatchIou, min_conf = 0.0, nms_thresh = kDefaultNmsThreshold;
  auto* evaluate = app.add_subcommand("evaluate", "Match predictions to ground truth and compute AP50/mAP50");
  evaluate->add_option("--manifest", manifest_path, "Manifest file")->required()->check(CLI::ExistingFile);
  add_prediction_flags(evaluate, pred);
  evaluate->add_option("--split", eval_split, "Evaluate only this split")->check(CLI::IsMember({"train", "val", "test"}));
  evaluate->add_option("--iou", iou_thresh, "IoU matching threshold")->capture_default_str();
  evaluate->add_option("--min-conf", min_conf, "Confidence filter before NMS")->capture_default_str();
  evaluate->add_option("--nms", nms_thresh, "NMS IoU threshold")->capture_default_str();
  evaluate->add_option("--out", eval_out, "Report JSON")->required();
  evaluate->add_option("--pr-csv", pr_dir, "Directory for per-class PR curve CSVs");

  // compare
  std::vector<std::string> report_paths;
  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "Rank evaluation reports by mAP50");
  compare->add_option("--reports", report_paths, "Report JSON files")->required()->check(CLI::ExistingFile);
  compare->add_option("--out", compare_out, "Also write the table as JSON");

  // score
  std::string case_id, score_out, mode = "pooled";
  bool all_cases = false;
  auto* score = app.add_subcommand("score", "Compute Ki-67 indices per case");
  score->add_option("--manifest", manifest_path, "Manifest file")->required()->check(CLI::ExistingFile);
  add_prediction_flags(score, pred);
  auto* case_opt = score->add_option("--case", case_id, "Case to score");
  auto* all_opt = score->add_flag("--all", all_cases, "Score every case");
  case_opt->excludes(all_opt);
  score->add_option("--min-conf", min_conf, "Confidence threshold (required, no default)")->required();
  score->add_option("--nms", nms_thresh, "NMS IoU threshold")->capture_default_str();
  score->add_option("--mode", mode, "Hotspot aggregation")->check(CLI::IsMember({"pooled", "mean"}))->capture_default_str();
  score->add_option("--out", score_out, "Output directory")->required();

  // render
  std::string image_id, render_out;
  OverlayStyle style;
  auto* render = app.add_subcommand("render", "Draw detections over an image");
  render->add_option("--manifest", manifest_path, "Manifest file")->required()->check(CLI::ExistingFile);
  add_prediction_flags(render, pred);
  render->add_option("--image", image_id, "Image id")->required();
  render->add_option("--min-conf", min_conf, "Confidence filter")->capture_default_str();
  render->add_option("--nms", nms_thresh, "NMS IoU threshold")->capture_default_str();
  render->add_option("--stroke", style.stroke, "Stroke width in pixels")->capture_default_str()->check(CLI::PositiveNumber);
  render->add_flag("--show-confidence", style.show_confidence, "Print confidences next to boxes");
  render->add_option("--out", render_out, "Output PNG")->required();

  // serve
  std::string log_dir, host = "127.0.0.1", ui_dir;
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Run the pathologist review service");
  serve->add_option("--manifest", manifest_path, "Manifest file")->required()->check(CLI::ExistingFile);
  add_prediction_flags(serve, pred);
  serve->add_option("--log-dir", log_dir, "Directory for per-case correction logs")->required();
  serve->add_option("--min-conf", min_conf, "Confidence threshold (required, no default)")->required();
  serve->add_option("--nms", nms_thresh, "NMS IoU threshold")->capture_default_str();
  serve->add_option("--mode", mode, "Hotspot aggregation")->check(CLI::IsMember({"pooled", "mean"}))->capture_default_str();
  serve->add_option("--host", host, "Bind address")->capture_default_str();
  serve->add_option("--port", port, "Port")->capture_default_str();
  serve->add_option("--ui-dir", ui_dir, "Static UI bundle served at /")->check(CLI::ExistingDirectory);

  // fixture
  std::string fixture_dir;
  FixtureOptions fixture_opts;
  auto* fixture = app.add_subcommand("fixture", "Generate the synthetic 12-image, 2-case test dataset");
  fixture->add_option("--out", fixture_dir, "Output directory")->required();
  fixture->add_option("--seed", fixture_opts.seed, "Generator seed")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (print_config && e.get_exit_code() == static_cast<int>(CLI::ExitCodes::RequiredError)) {
      // fall through to printing below
    } else {
      err << "ki67: " << e.what() << '\n';
      return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
    }
  }
  if (print_config) {
    out << app.config_to_str(true, false);
    return kExitOk;
  }

  try {
    if (*ingest) {
      LabelMap labels = default_label_map();
      for (const auto& kv : label_overrides) {
        const auto eq = kv.find('=');
        std::optional<CellClass> cls;
        if (eq != std::string::npos) cls = class_from_code(std::atoll(kv.c_str() + eq + 1));
        if (!cls || eq == 0) throw UsageError("--label-map expects LABEL=0 or LABEL=1, got '" + kv + "'");
        labels[kv.substr(0, eq)] = *cls;
      }
      const fs::path out_path(ingest_out);
      IngestResult r = ingest_directory(images_dir, annotations_dir,
                                        format == "yolo" ? AnnotationFormat::Yolo : AnnotationFormat::RectJson,
                                        out_path.parent_path().empty() ? fs::path(".") : out_path.parent_path(), labels);
      for (const auto& w : r.warnings) err << "warning: " << w << '\n';
      save_manifest(out_path, r.manifest);
      out << "ingested " << r.manifest.records.size() << " images into " << ingest_out << '\n';
      return kExitOk;
    }

    if (*validate) {
      const DatasetManifest m = load_manifest(manifest_path);
      const auto findings = validate_manifest(m);
      std::size_t errors = 0;
      for (const auto& f : findings) {
        const bool is_error = f.severity == Finding::Severity::Error;
        errors += is_error;
        out << (is_error ? "error" : "warning") << '\t' << f.image_id << '\t' << f.message << '\n';
      }
      err << findings.size() << " finding(s), " << errors << " error(s)\n";
      return errors == 0 ? kExitOk : kExitValidation;
    }

    if (*split) {
      if (!counts_text.empty()) {
        std::array<std::size_t, 3> counts{};
        std::istringstream in(counts_text);
        std::string tok;
        int n = 0;
        while (std::getline(in, tok, ',')) {
          if (n >= 3 || tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
            throw UsageError("--counts expects three non-negative integers TRAIN,VAL,TEST");
          }
          counts[n++] = std::stoull(tok);
        }
        if (n != 3) throw UsageError("--counts expects three non-negative integers TRAIN,VAL,TEST");
        split_spec.counts = counts;
      }
      const DatasetManifest m = load_manifest(manifest_path);
      const DatasetManifest result = split_dataset(m, split_spec);
      const fs::path dest = split_out.empty() ? fs::path(manifest_path) : fs::path(split_out);
      save_manifest(dest, rebase_manifest(result, dest.parent_path().empty() ? fs::path(".") : dest.parent_path()));
      std::array<std::size_t, 3> sizes{};
      for (const auto& [id, s] : result.split) sizes[static_cast<int>(s)] += 1;
      out << "train " << sizes[0] << "\nval " << sizes[1] << "\ntest " << sizes[2] << '\n';
      return kExitOk;
    }

    if (*augment) {
      DatasetManifest m = load_manifest(manifest_path);
      const fs::path dir(aug_dir);
      const fs::path dest = aug_out.empty() ? dir / "manifest.json" : fs::path(aug_out);
      m = rebase_manifest(std::move(m), dest.parent_path().empty() ? fs::path(".") : dest.parent_path());
      AugmentPlan plan;
      if (!plan_in.empty()) {
        plan = plan_from_json(read_json(plan_in));
      } else {
        if (augment->count("--target") == 0) throw UsageError("augment needs --target or --plan");
        plan = generate_plan(m, aug_seed, target);
      }
      write_file(dir / "plan.json", plan_to_json(plan).dump(2) + "\n");
      ExecuteResult r = execute_plan(m, plan, dir, aug_opts, aug_overwrite);
      for (const auto& e : r.errors) err << "error: " << e << '\n';
      save_manifest(dest, r.manifest);
      out << "manifest has " << r.manifest.records.size() << " records (" << plan.entries.size() - r.errors.size()
          << " augmented)\n";
      return r.errors.empty() ? kExitOk : kExitValidation;
    }

    if (*evaluate) {
      check_unit("--iou", iou_thresh);
      check_unit("--min-conf", min_conf);
      check_unit("--nms", nms_thresh);
      const DatasetManifest m = load_manifest(manifest_path);
      const PredictionSet set = load_prediction_set(pred, m, err);
      std::vector<std::string> ids;
      if (!eval_split.empty()) {
        if (m.split.empty()) throw Error(ErrorCode::EmptySubset, "manifest has no split; run `ki67 split` first");
        const SplitName want = *split_from_name(eval_split);
        for (const auto& r : m.records) {
          auto it = m.split.find(r.image_id);
          if (it != m.split.end() && it->second == want) ids.push_back(r.image_id);
        }
      } else {
        for (const auto& r : m.records) ids.push_back(r.image_id);
      }
      const auto dets = postprocess(set, min_conf, nms_thresh);
      const EvaluationReport report = evaluate_run(set.run_label, dets, m, ids, iou_thresh);
      write_file(eval_out, report_to_json(report).dump(2) + "\n");
      if (!pr_dir.empty()) {
        for (CellClass c : kAllClasses) {
          const std::string name = report.run_label + "_" + std::string(class_name(c)) + ".csv";
          write_file(fs::path(pr_dir) / name, pr_curve_csv(report.of(c).curve));
        }
      }
      char line[128];
      std::snprintf(line, sizeof line, "%s: mAP50 %.4f over %zu image(s)\n", report.run_label.c_str(), report.map50,
                    report.images);
      out << line;
      return kExitOk;
    }

    if (*compare) {
      std::vector<EvaluationReport> reports;
      for (const auto& p : report_paths) reports.push_back(report_from_json(read_json(p)));
      const ComparisonTable table = compare_runs(reports);
      out << comparison_to_text(table);
      if (!compare_out.empty()) write_file(compare_out, comparison_to_json(table).dump(2) + "\n");
      return kExitOk;
    }

    if (*score) {
      if (case_id.empty() && !all_cases) throw UsageError("score needs --case CASE or --all");
      check_unit("--min-conf", min_conf);
      check_unit("--nms", nms_thresh);
      const DatasetManifest m = load_manifest(manifest_path);
      const PredictionSet set = load_prediction_set(pred, m, err);
      const ScoringConfig config{min_conf, nms_thresh, *aggregation_from_name(mode)};
      const auto dets = hotspot_detections(m, set, config);
      const std::vector<std::string> cases = all_cases ? m.case_ids() : std::vector<std::string>{case_id};
      int status = kExitOk;
      for (const auto& c : cases) {
        try {
          const CaseScore s = score_manifest_case(m, dets, c, config);
          const CaseReport report = emit_case_report(s);
          write_file(fs::path(score_out) / (c + ".json"), report.json);
          write_file(fs::path(score_out) / (c + ".txt"), report.text);
          for (const auto& id : s.excluded_images) err << "warning: " << c << ": " << id << " has no cells, excluded\n";
          char line[160];
          std::snprintf(line, sizeof line, "%s\t%.2f\t%s\t%s\n", c.c_str(), s.index_percent,
                        std::string(band_name(s.band)).c_str(), s.adequate ? "adequate" : "inadequate");
          out << line;
        } catch (const Error& e) {
          err << "error: " << c << ": " << e.what() << '\n';
          status = kExitValidation;
        }
      }
      return status;
    }

    if (*render) {
      check_unit("--min-conf", min_conf);
      check_unit("--nms", nms_thresh);
      const DatasetManifest m = load_manifest(manifest_path);
      const ImageRecord* rec = m.find(image_id);
      if (rec == nullptr) throw Error(ErrorCode::UnknownImage, "unknown image " + image_id);
      const PredictionSet set = load_prediction_set(pred, m, err);
      const auto dets = postprocess(set, min_conf, nms_thresh);
      auto it = dets.find(image_id);
      std::vector<std::string> warnings;
      const RasterImage overlay = render_overlay(read_png(m.resolve_source(*rec)),
                                                 it == dets.end() ? std::vector<Detection>{} : it->second, style,
                                                 &warnings);
      for (const auto& w : warnings) err << "warning: " << w << '\n';
      write_png(render_out, overlay);
      return kExitOk;
    }

    if (*serve) {
      check_unit("--min-conf", min_conf);
      check_unit("--nms", nms_thresh);
      DatasetManifest m = load_manifest(manifest_path);
      const PredictionSet set = load_prediction_set(pred, m, err);
      const ScoringConfig config{min_conf, nms_thresh, *aggregation_from_name(mode)};
      ReviewStore store(std::move(m), set, config, std::make_shared<JsonlEventLog>(log_dir));
      ReviewServer server(store, style, ui_dir.empty() ? std::nullopt : std::optional<fs::path>(ui_dir));
      err << "serving on http://" << host << ":" << port << '\n';
      if (!server.listen(host, port)) throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
      return kExitOk;
    }

    if (*fixture) {
      const FixtureSummary s = generate_fixture(fixture_dir, fixture_opts);
      out << "wrote " << s.image_ids.size() << " images (" << s.positives << " positive, " << s.negatives
          << " negative cells) to " << fixture_dir << '\n';
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "ki67: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "ki67: " << to_string(e.code()) << ": " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "ki67: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitUsage;
}

}  // namespace ki67::cli
