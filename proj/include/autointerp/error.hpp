#pragma once

#include <stdexcept>
#include <string>

namespace autointerp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Activation cache could not be opened or read.
class CacheError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or precondition violation in a pure computation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A model response could not be interpreted. Carries the raw payload.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::string raw)
      : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

/// Non-retryable provider error (4xx other than 429).
class ProviderError : public Error {
 public:
  ProviderError(int status, const std::string& body)
      : Error("provider error " + std::to_string(status) + ": " + body),
        status_(status),
        body_(body) {}
  int status() const noexcept { return status_; }
  const std::string& body() const noexcept { return body_; }

 private:
  int status_;
  std::string body_;
};

class RetryExhaustedError : public Error {
 public:
  using Error::Error;
};

/// The endpoint does not support a required feature (e.g. echoed prompt logprobs).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace autointerp
