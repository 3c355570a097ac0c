// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace davs {

// Root of all errors thrown by this library. Every failure that crosses a
// module boundary is one of the subclasses below so callers can map errors
// to exit codes without string matching.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller violated a documented precondition (bad shape, wrong dtype,
// out-of-range argument). Indicates a programming error at the call site.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input values are structurally valid but outside the supported domain
// (e.g. waveform shorter than one analysis window, unsupported sample rate).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Filesystem / OS level failure: cannot open, read, write or rename.
class StorageError : public Error {
 public:
  using Error::Error;
};

// A file exists and is readable but its bytes do not parse as the expected
// format (bad magic, truncated blob, malformed JSON, wrong WAV encoding).
class FormatError : public Error {
 public:
  using Error::Error;
};

// A checkpoint parsed fine but belongs to an incompatible network
// configuration (different shapes or config hash).
class CheckpointMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Configuration file or override is invalid (unknown key, bad value).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss. Carries the loss name and step.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& loss_name, long step, const std::string& msg)
      : Error(msg), loss_name_(loss_name), step_(step) {}
  const std::string& loss_name() const { return loss_name_; }
  long step() const { return step_; }

 private:
  std::string loss_name_;
  long step_;
};

// An inference source clip is shorter than one model window.
class ShortSourceError : public DomainError {
 public:
  using DomainError::DomainError;
};

namespace detail {
inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}
}  // namespace detail

#define DAVS_CHECK(cond, msg) ::davs::detail::check((cond), (msg))

}  // namespace davs
