#pragma once

#include <stdexcept>
#include <string>

namespace clvar {

// Failure classes map one-to-one onto the CLI exit codes:
// invalid_input_error -> 1, data_error -> 2, numerical_error -> 3.

class invalid_input_error : public std::invalid_argument {
public:
    explicit invalid_input_error(const std::string& msg) : std::invalid_argument(msg) {}
};

class data_error : public std::runtime_error {
public:
    explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

class numerical_error : public std::runtime_error {
public:
    explicit numerical_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace clvar
