#pragma once

#include <stdexcept>
#include <string>

namespace conserve {

// Invalid values or states in otherwise well-formed requests (exit code 1).
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

// Unreadable/unwritable files, malformed input files, bad configuration (exit code 2).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace conserve
