#include "subsel/error.hpp"

namespace subsel {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io: return "io";
    case ErrorKind::ManifestMissing: return "manifest-missing";
    case ErrorKind::Format: return "format";
    case ErrorKind::Corruption: return "corruption";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::DimensionMismatch: return "dimension-mismatch";
    case ErrorKind::DuplicateId: return "duplicate-id";
    case ErrorKind::Config: return "config";
    case ErrorKind::Precondition: return "precondition";
    case ErrorKind::NoInstructionTokens: return "no-instruction-tokens";
    case ErrorKind::DegenerateAttention: return "degenerate-attention";
    case ErrorKind::DegenerateSpectrum: return "degenerate-spectrum";
    case ErrorKind::TooFewSamples: return "too-few-samples";
    case ErrorKind::Size: return "size";
  }
  return "unknown";
}

}  // namespace subsel
