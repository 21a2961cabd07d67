#include "rflow/error.hpp"

namespace rflow {

std::string_view err_name(Err code) {
    switch (code) {
        case Err::ShapeMismatch: return "ShapeMismatch";
        case Err::InvalidStride: return "InvalidStride";
        case Err::NotScalar: return "NotScalar";
        case Err::NoTape: return "NoTape";
        case Err::OddDim: return "OddDim";
        case Err::IndivisibleExtent: return "IndivisibleExtent";
        case Err::BadMagic: return "BadMagic";
        case Err::UnsupportedDatatype: return "UnsupportedDatatype";
        case Err::UnsupportedDims: return "UnsupportedDims";
        case Err::InvalidSpacing: return "InvalidSpacing";
        case Err::NoForeground: return "NoForeground";
        case Err::OutOfBounds: return "OutOfBounds";
        case Err::ZeroReference: return "ZeroReference";
        case Err::ZeroVariance: return "ZeroVariance";
        case Err::TooSmall: return "TooSmall";
        case Err::TooFewSamples: return "TooFewSamples";
        case Err::TOutOfRange: return "TOutOfRange";
        case Err::DataMissing: return "DataMissing";
        case Err::ConfigInvalid: return "ConfigInvalid";
        case Err::CheckpointMismatch: return "CheckpointMismatch";
        case Err::MissingPrediction: return "MissingPrediction";
        case Err::Internal: return "Internal";
    }
    return "Unknown";
}

bool err_is_user_input(Err code) {
    switch (code) {
        case Err::BadMagic:
        case Err::UnsupportedDatatype:
        case Err::UnsupportedDims:
        case Err::InvalidSpacing:
        case Err::DataMissing:
        case Err::ConfigInvalid:
        case Err::CheckpointMismatch:
        case Err::MissingPrediction:
            return true;
        default:
            return false;
    }
}

}  // namespace rflow
