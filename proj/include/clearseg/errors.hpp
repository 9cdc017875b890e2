#pragma once

#include <stdexcept>
#include <string>

namespace clearseg {

// Error taxonomy. Each class maps to a process exit code so the CLI can
// translate failures without string matching:
//   input_error      -> 2   (bad arguments, bad image/label data, shape misuse)
//   checkpoint_error -> 3   (unreadable archives, missing keys, shape mismatches)
//   numeric_error    -> 4   (NaN/Inf escaping a kernel or branch)

class error : public std::runtime_error {
public:
    error(std::string stage, const std::string& msg)
        : std::runtime_error(stage + ": " + msg), stage_(std::move(stage)) {}
    virtual int exit_code() const noexcept { return 1; }
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

class input_error : public error {
public:
    using error::error;
    int exit_code() const noexcept override { return 2; }
};

// Shape/rank violations on kernel entry points.
class dimension_error : public input_error {
public:
    using input_error::input_error;
};

// Inputs that make a result undefined (zero rows before normalization,
// single-element entropy maps, empty means).
class degenerate_error : public input_error {
public:
    using input_error::input_error;
};

class checkpoint_error : public error {
public:
    using error::error;
    int exit_code() const noexcept override { return 3; }
};

class numeric_error : public error {
public:
    using error::error;
    int exit_code() const noexcept override { return 4; }
};

} // namespace clearseg
