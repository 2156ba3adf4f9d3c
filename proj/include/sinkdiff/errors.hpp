#pragma once

#include <stdexcept>
#include <string>

namespace sinkdiff {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define SINKDIFF_DEFINE_ERROR(Name)          \
    class Name : public Error {              \
    public:                                  \
        using Error::Error;                  \
    };

SINKDIFF_DEFINE_ERROR(DimensionError)     // incompatible tensor shapes
SINKDIFF_DEFINE_ERROR(RankError)          // wrong tensor rank (e.g. backward on non-scalar)
SINKDIFF_DEFINE_ERROR(DegenerateRowError) // softmax row with every entry masked
SINKDIFF_DEFINE_ERROR(IndexError)         // token id or row index out of range
SINKDIFF_DEFINE_ERROR(TapeError)          // backward without a recording tape
SINKDIFF_DEFINE_ERROR(LengthError)        // sequence longer than the model supports
SINKDIFF_DEFINE_ERROR(ConfigError)        // invalid configuration value
SINKDIFF_DEFINE_ERROR(StepError)          // diffusion step out of range
SINKDIFF_DEFINE_ERROR(NoMaskError)        // denoise step on a fully unmasked sequence
SINKDIFF_DEFINE_ERROR(ConsistencyError)   // sink index map does not match its data
SINKDIFF_DEFINE_ERROR(CorpusError)        // empty or unusable corpus
SINKDIFF_DEFINE_ERROR(IoError)            // unreadable / unwritable path
SINKDIFF_DEFINE_ERROR(VersionError)       // checkpoint/trace format or config mismatch
SINKDIFF_DEFINE_ERROR(AnalysisError)      // analysis preconditions violated
SINKDIFF_DEFINE_ERROR(TrainingError)      // non-finite loss and similar aborts

#undef SINKDIFF_DEFINE_ERROR

} // namespace sinkdiff
