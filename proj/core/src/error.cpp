#include "ki67/error.hpp"

namespace ki67 {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::MalformedDocument: return "MalformedDocument";
    case ErrorCode::MalformedLine: return "MalformedLine";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::UnknownClassId: return "UnknownClassId";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::DegenerateBox: return "DegenerateBox";
    case ErrorCode::ConfidenceOutOfRange: return "ConfidenceOutOfRange";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::SplitExists: return "SplitExists";
    case ErrorCode::EmptyResult: return "EmptyResult";
    case ErrorCode::TargetTooLarge: return "TargetTooLarge";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::EmptySubset: return "EmptySubset";
    case ErrorCode::NoGroundTruth: return "NoGroundTruth";
    case ErrorCode::NoCells: return "NoCells";
    case ErrorCode::EmptyCase: return "EmptyCase";
    case ErrorCode::UnknownCase: return "UnknownCase";
    case ErrorCode::UnknownImage: return "UnknownImage";
    case ErrorCode::VersionConflict: return "VersionConflict";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::InvalidBox: return "InvalidBox";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace ki67
