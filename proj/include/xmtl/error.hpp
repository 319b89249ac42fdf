#pragma once

#include <stdexcept>
#include <string>

namespace xmtl {

// Base class for all library errors. Subclasses name the failure mode so
// callers can catch-by-type; the CLI maps them onto exit codes.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeMismatch : Error {
    explicit ShapeMismatch(const std::string& msg) : Error("shape mismatch: " + msg) {}
};

struct NonFiniteGradient : Error {
    explicit NonFiniteGradient(const std::string& msg) : Error("non-finite gradient: " + msg) {}
};

struct NonFiniteLoss : Error {
    explicit NonFiniteLoss(const std::string& msg) : Error("non-finite loss: " + msg) {}
};

struct BadClass : Error {
    explicit BadClass(const std::string& msg) : Error("bad class: " + msg) {}
};

struct BadLength : Error {
    explicit BadLength(const std::string& msg) : Error("bad length: " + msg) {}
};

struct ConstantSeries : Error {
    explicit ConstantSeries(const std::string& msg) : Error("constant series: " + msg) {}
};

struct MissingRng : Error {
    explicit MissingRng(const std::string& msg) : Error("missing rng: " + msg) {}
};

struct StaleTape : Error {
    explicit StaleTape(const std::string& msg) : Error("stale tape: " + msg) {}
};

struct EpochOutOfRange : Error {
    explicit EpochOutOfRange(const std::string& msg) : Error("epoch out of range: " + msg) {}
};

struct NoCandidate : Error {
    explicit NoCandidate(const std::string& msg) : Error("no candidate: " + msg) {}
};

struct EmptyBatch : Error {
    explicit EmptyBatch(const std::string& msg) : Error("empty batch: " + msg) {}
};

struct EmptyReference : Error {
    explicit EmptyReference(const std::string& msg) : Error("empty reference: " + msg) {}
};

struct EmptySplit : Error {
    explicit EmptySplit(const std::string& msg) : Error("empty split: " + msg) {}
};

struct InfeasibleLabel : Error {
    explicit InfeasibleLabel(const std::string& msg) : Error("infeasible label: " + msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

}  // namespace xmtl
