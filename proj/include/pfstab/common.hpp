#ifndef PFSTAB_COMMON_HPP
#define PFSTAB_COMMON_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pfstab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class ErrorCode {
    UnknownSystemKind,
    DimensionMismatch,
    NonFiniteState,
    EmptyDataset,
    MalformedRow,
    ActionMismatch,
    TooFewPoints,
    SingularLambda,
    AllStatesAttractor,
    MissingAction,
    InvalidConfig,
    MissingArtifact,
    Io,
    SolverFailure,
    VerificationFailed,
};

const char* to_string(ErrorCode code);

/// Single exception type for the library; `code()` tells callers what went wrong.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

// Portable uniform double in [0, 1) from a 64-bit generator output.
inline double unit_double(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace pfstab

#endif  // PFSTAB_COMMON_HPP
