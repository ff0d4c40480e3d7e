#pragma once

#include <stdexcept>
#include <string>

namespace elsa {

/// Base class for every error raised by the toolkit. `kind()` is a stable,
/// machine-readable class name that the CLI prints on failure.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define ELSA_DEFINE_ERROR(Name, Kind)                                     \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(Kind, what) {}         \
  };

ELSA_DEFINE_ERROR(DimensionError, "dimension_error")
ELSA_DEFINE_ERROR(IndexError, "index_error")
ELSA_DEFINE_ERROR(ContractError, "contract_error")
ELSA_DEFINE_ERROR(ConfigurationError, "configuration_error")
ELSA_DEFINE_ERROR(DivergenceError, "divergence_error")
ELSA_DEFINE_ERROR(SchemaError, "schema_error")
ELSA_DEFINE_ERROR(ArtifactError, "artifact_error")
ELSA_DEFINE_ERROR(IncompatibleModeError, "incompatible_mode_error")
ELSA_DEFINE_ERROR(SearchSpaceError, "search_space_error")
ELSA_DEFINE_ERROR(ValueError, "value_error")

#undef ELSA_DEFINE_ERROR

}  // namespace elsa
