#pragma once

#include <stdexcept>
#include <string>

namespace mmbert {

/// Root of every error raised by the library. `kind()` is a short stable tag
/// used by the CLI for its one-line machine-parsable error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define MMBERT_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(tag, what) {}        \
  };

MMBERT_DEFINE_ERROR(DimensionError, "dimension")
MMBERT_DEFINE_ERROR(ConfigError, "config")
MMBERT_DEFINE_ERROR(ArgumentError, "argument")
MMBERT_DEFINE_ERROR(NumericError, "numeric")
MMBERT_DEFINE_ERROR(VocabError, "vocab")
MMBERT_DEFINE_ERROR(SequenceLengthError, "sequence-length")
MMBERT_DEFINE_ERROR(GenerationError, "generation")
MMBERT_DEFINE_ERROR(SkipError, "skip")
MMBERT_DEFINE_ERROR(StateError, "state")
MMBERT_DEFINE_ERROR(InvariantError, "invariant")
MMBERT_DEFINE_ERROR(FormatError, "format")
MMBERT_DEFINE_ERROR(StageDependencyError, "stage-dependency")
MMBERT_DEFINE_ERROR(IoError, "io")

#undef MMBERT_DEFINE_ERROR

}  // namespace mmbert
