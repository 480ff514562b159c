#pragma once

#include <stdexcept>
#include <string>

namespace cdsens {

// All errors carry the module and operation of origin in the message.
class Error : public std::runtime_error {
public:
    Error(const std::string& where, const std::string& what)
        : std::runtime_error("[" + where + "] " + what), where_(where) {}
    const std::string& where() const { return where_; }

private:
    std::string where_;
};

// raised by fit_logistic when coefficients diverge
class SeparationError : public Error {
public:
    SeparationError(const std::string& where, const std::string& what)
        : Error(where, what) {}
};

} // namespace cdsens
