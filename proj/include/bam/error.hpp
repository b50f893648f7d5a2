#pragma once

#include <stdexcept>
#include <string>

namespace bam {

class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Shape or dimension disagreement between operands.
class DimensionError : public Error
{
public:
    using Error::Error;
};

/// Argument outside the domain of a function (log of a non-positive value, ...).
class DomainError : public Error
{
public:
    using Error::Error;
};

/// A row with no admissible entries was asked to be normalized.
class DegenerateRowError : public Error
{
public:
    using Error::Error;
};

class ParameterError : public Error
{
public:
    using Error::Error;
};

class ConfigError : public Error
{
public:
    using Error::Error;
};

class ParseError : public Error
{
public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : Error(file + ":" + std::to_string(line) + ": " + what), line_(line)
    {
    }
    explicit ParseError(const std::string& what) : Error(what) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_ = 0;
};

class IntegrityError : public Error
{
public:
    using Error::Error;
};

class ValidationError : public Error
{
public:
    using Error::Error;
};

/// Raised when training produces non-finite gradients or losses.
class DivergenceError : public Error
{
public:
    using Error::Error;
};

class IoError : public Error
{
public:
    using Error::Error;
};

}  // namespace bam
