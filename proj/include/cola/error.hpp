#pragma once

#include <stdexcept>
#include <string>

namespace cola {

enum class ErrorKind {
  dimension,
  index,
  state,
  argument,
  config,
  registry,
  ingest,
  profile,
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::index: return "index";
    case ErrorKind::state: return "state";
    case ErrorKind::argument: return "argument";
    case ErrorKind::config: return "config";
    case ErrorKind::registry: return "registry";
    case ErrorKind::ingest: return "ingest";
    case ErrorKind::profile: return "profile";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Base of every error thrown by the library. The kind doubles as the
/// category printed by the command line tool.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define COLA_DEFINE_ERROR(Name, kind_value)                                  \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& message) : Error(kind_value, message) {} \
  };

COLA_DEFINE_ERROR(DimensionError, ErrorKind::dimension)
COLA_DEFINE_ERROR(IndexError, ErrorKind::index)
COLA_DEFINE_ERROR(StateError, ErrorKind::state)
COLA_DEFINE_ERROR(ArgumentError, ErrorKind::argument)
COLA_DEFINE_ERROR(ConfigError, ErrorKind::config)
COLA_DEFINE_ERROR(RegistryError, ErrorKind::registry)
COLA_DEFINE_ERROR(IngestError, ErrorKind::ingest)
COLA_DEFINE_ERROR(ProfileError, ErrorKind::profile)
COLA_DEFINE_ERROR(IoError, ErrorKind::io)

#undef COLA_DEFINE_ERROR

}  // namespace cola
