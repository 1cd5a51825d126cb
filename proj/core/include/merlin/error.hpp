#pragma once

#include <stdexcept>
#include <string>

namespace merlin {

/// Base class of every error raised by the library. The CLI maps the
/// concrete subclasses onto stable process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MERLIN_DEFINE_ERROR(Name)          \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

MERLIN_DEFINE_ERROR(InvalidInput);
MERLIN_DEFINE_ERROR(UnknownLanguage);
MERLIN_DEFINE_ERROR(InvalidTokenId);
MERLIN_DEFINE_ERROR(ShapeError);
MERLIN_DEFINE_ERROR(UnknownProjection);
MERLIN_DEFINE_ERROR(DatasetSchemaError);
MERLIN_DEFINE_ERROR(FreezeViolation);
MERLIN_DEFINE_ERROR(PlanError);
MERLIN_DEFINE_ERROR(QuotaShortfall);
MERLIN_DEFINE_ERROR(TemplateError);
MERLIN_DEFINE_ERROR(InvalidLayer);
MERLIN_DEFINE_ERROR(ConfigError);
MERLIN_DEFINE_ERROR(MissingArtifact);
MERLIN_DEFINE_ERROR(DigestMismatch);

#undef MERLIN_DEFINE_ERROR

}  // namespace merlin
