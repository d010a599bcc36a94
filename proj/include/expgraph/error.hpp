#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace expgraph {

enum class ErrorKind {
    BadMagic,
    HeaderParseError,
    PayloadSizeMismatch,
    NonFiniteValue,
    IndexOutOfRange,
    DanglingEdge,
    SchemaError,
    MissingNeighborInference,
    InsufficientCandidates,
    EmptyDataset,
    LayerMissingInImage,
    AllZeroScores,
    InsufficientSamples,
    SeparationUnsatisfiable,
    ShapeMismatch,
    NoDetectedPatterns,
    InvalidArgument,
    IoError,
};

std::string_view to_string(ErrorKind kind);

// Every failure surfaced by the library carries one of the kinds above plus
// a short free-form context (file name, byte offset, node id, ...).
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string context);

    ErrorKind kind() const noexcept { return kind_; }
    const std::string& context() const noexcept { return context_; }

private:
    ErrorKind kind_;
    std::string context_;
};

[[noreturn]] void fail(ErrorKind kind, std::string context);

}  // namespace expgraph
