#pragma once

#include <stdexcept>
#include <string>

namespace karma {

// Root of the library's exception hierarchy.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Entity type not in the graph's registered type set.
class SchemaError : public Error {
public:
    using Error::Error;
};

// Structural graph violations: dangling edge endpoints, unknown entity ids.
class GraphError : public Error {
public:
    using Error::Error;
};

// Embedding index problems (dimension mismatch, corrupt cache).
class IndexError : public Error {
public:
    using Error::Error;
};

// Bad caller input (empty text where non-empty is required, malformed files).
class InvalidInputError : public Error {
public:
    using Error::Error;
};

// Template rendering with unbound or leftover placeholders.
class TemplateError : public Error {
public:
    using Error::Error;
};

// Model output could not be parsed into the expected message shape.
class ParseError : public Error {
public:
    enum class Kind { NoJson, SchemaViolation };

    ParseError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

// Backend failures. ScriptGap is the scripted backend's "no rule matched";
// Transient marks retryable conditions (transport error, HTTP 429/5xx).
class BackendError : public Error {
public:
    enum class Kind { Unavailable, ScriptGap, Transient };

    BackendError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

// Non-finite verification signal or mismatched weight list.
class EvaluationError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace karma
