#pragma once

#include <stdexcept>
#include <string>

namespace bfsurf {

enum class Errc {
  invalid_argument,      // caller-side validation failure
  integrand_underflow,
  invalid_integrand,
  laplace_failure,
  not_positive_definite,
  insufficient_sample,
  insufficient_training_fraction,
  degenerate_data,
  group_too_small,
  degenerate_group_design,
  too_few_groups,
  parse_error,
  grid_too_large,
  fit_failed,
  sweep_failed,  // every point of a surface sweep failed
};

/// Library-wide exception. `field()` names the offending input when the
/// failure is a validation error, so the HTTP layer can report it.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what, std::string field = {})
      : std::runtime_error(what), code_(code), field_(std::move(field)) {}

  Errc code() const noexcept { return code_; }
  const std::string& field() const noexcept { return field_; }

 private:
  Errc code_;
  std::string field_;
};

}  // namespace bfsurf
