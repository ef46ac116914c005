#pragma once

#include <stdexcept>
#include <string>

namespace stmem {

// All recoverable failures carry a short machine-readable code ("FormatError",
// "NearConstantSignal", ...) plus a human-readable message. The CLI prints
// them as a single "error: <code>: <message>" line.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

    const std::string& code() const { return code_; }

private:
    std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace stmem
