#pragma once

#include <stdexcept>
#include <string>

namespace lqmfg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "Error"; }
};

#define LQMFG_DEFINE_ERROR(Name)               \
  class Name : public Error {                   \
   public:                                      \
    using Error::Error;                         \
    const char* kind() const noexcept override { \
      return #Name;                             \
    }                                           \
  };

LQMFG_DEFINE_ERROR(ParseError)
LQMFG_DEFINE_ERROR(DimensionError)
LQMFG_DEFINE_ERROR(ValueError)
LQMFG_DEFINE_ERROR(NonFiniteRhs)
LQMFG_DEFINE_ERROR(GridMismatch)
LQMFG_DEFINE_ERROR(SingularGain)
LQMFG_DEFINE_ERROR(RelationViolated)
LQMFG_DEFINE_ERROR(NonFiniteState)
LQMFG_DEFINE_ERROR(NotSolvableAtCap)

#undef LQMFG_DEFINE_ERROR

}  // namespace lqmfg
