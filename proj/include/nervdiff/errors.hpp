#pragma once

#include <stdexcept>
#include <string>

namespace nervdiff {

// Raised when a loss or sampler state goes non-finite / diverges.
// The CLI maps this to exit code 3.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckpointError : std::runtime_error {
    enum class Kind { io, bad_magic, bad_version, corrupt_header, truncated, duplicate_name, missing_entry };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

struct VideoIoError : std::runtime_error {
    enum class Kind { io, missing_frame, size_mismatch, bad_manifest, frame_count_mismatch };
    Kind kind;
    VideoIoError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

}  // namespace nervdiff
