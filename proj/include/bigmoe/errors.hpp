#pragma once

#include <stdexcept>
#include <string>

namespace bigmoe {

/// Error category. The numeric value doubles as the CLI exit code.
enum class ErrorCategory : int {
    Usage = 2,
    Config = 3,
    Dimension = 4,
    Input = 5,
    Format = 6,
    Numeric = 7,
};

inline const char* category_name(ErrorCategory c) noexcept
{
    switch (c) {
        case ErrorCategory::Usage: return "usage";
        case ErrorCategory::Config: return "config";
        case ErrorCategory::Dimension: return "dimension";
        case ErrorCategory::Input: return "input";
        case ErrorCategory::Format: return "format";
        case ErrorCategory::Numeric: return "numeric";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(std::string(category_name(category)) + " error: " + what), category_(category)
    {
    }
    ErrorCategory category() const noexcept { return category_; }
    int exit_code() const noexcept { return static_cast<int>(category_); }

private:
    ErrorCategory category_;
};

#define BIGMOE_DEFINE_ERROR(Name, Cat)                                                  \
    class Name : public Error {                                                         \
    public:                                                                             \
        explicit Name(const std::string& what) : Error(ErrorCategory::Cat, what) {}     \
    };

BIGMOE_DEFINE_ERROR(UsageError, Usage)
BIGMOE_DEFINE_ERROR(ConfigError, Config)
BIGMOE_DEFINE_ERROR(DimensionError, Dimension)
BIGMOE_DEFINE_ERROR(InputError, Input)
BIGMOE_DEFINE_ERROR(FormatError, Format)
BIGMOE_DEFINE_ERROR(NumericError, Numeric)

#undef BIGMOE_DEFINE_ERROR

} // namespace bigmoe
