// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

// Caller broke a documented precondition (wrong shape, non-scalar loss, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed external input: checkpoint container, CIFAR record, config document.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Config document failed schema validation; `path` names the offending field.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Training produced a non-finite loss.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MOELAB_REQUIRE(cond, msg)                           \
  do {                                                      \
    if (!(cond)) throw ::moelab::ContractError(std::string(msg)); \
  } while (0)

}  // namespace moelab
