#include "expgraph/error.hpp"

namespace expgraph {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::HeaderParseError: return "HeaderParseError";
    case ErrorKind::PayloadSizeMismatch: return "PayloadSizeMismatch";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::DanglingEdge: return "DanglingEdge";
    case ErrorKind::SchemaError: return "SchemaError";
    case ErrorKind::MissingNeighborInference: return "MissingNeighborInference";
    case ErrorKind::InsufficientCandidates: return "InsufficientCandidates";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::LayerMissingInImage: return "LayerMissingInImage";
    case ErrorKind::AllZeroScores: return "AllZeroScores";
    case ErrorKind::InsufficientSamples: return "InsufficientSamples";
    case ErrorKind::SeparationUnsatisfiable: return "SeparationUnsatisfiable";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NoDetectedPatterns: return "NoDetectedPatterns";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

Error::Error(ErrorKind kind, std::string context)
    : std::runtime_error(std::string(to_string(kind)) + ": " + context),
      kind_(kind),
      context_(std::move(context)) {}

void fail(ErrorKind kind, std::string context) {
    throw Error(kind, std::move(context));
}

}  // namespace expgraph
