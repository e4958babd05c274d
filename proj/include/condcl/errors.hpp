#pragma once

#include <stdexcept>
#include <string>

namespace condcl {

// Root of every error raised by the library. Subclasses exist so callers
// (and the CLI exit-code mapping) can tell failure classes apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CONDCL_DEFINE_ERROR(Name)          \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

CONDCL_DEFINE_ERROR(InvalidArgument);
CONDCL_DEFINE_ERROR(ShapeMismatchError);
CONDCL_DEFINE_ERROR(NonFiniteError);
CONDCL_DEFINE_ERROR(ZeroRowError);
CONDCL_DEFINE_ERROR(EmptyInputError);

CONDCL_DEFINE_ERROR(BandwidthError);
CONDCL_DEFINE_ERROR(ArityMismatchError);
CONDCL_DEFINE_ERROR(UnknownFamilyError);

CONDCL_DEFINE_ERROR(DegenerateWeightsError);
CONDCL_DEFINE_ERROR(AllSimilarError);
CONDCL_DEFINE_ERROR(NoPositiveError);

CONDCL_DEFINE_ERROR(NonFiniteLossError);
CONDCL_DEFINE_ERROR(RejectionBudgetError);
CONDCL_DEFINE_ERROR(StaleCacheError);

CONDCL_DEFINE_ERROR(FormatError);
CONDCL_DEFINE_ERROR(DegenerateLabelsError);
CONDCL_DEFINE_ERROR(ConfigError);

#undef CONDCL_DEFINE_ERROR

}  // namespace condcl
