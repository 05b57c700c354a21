// SPDX-License-Identifier: Apache-2.0
//
// Error types thrown by the library. Each names the contract it guards.

#pragma once

#include <stdexcept>
#include <string>

namespace minivlm {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define MINIVLM_DEFINE_ERROR(NAME)                                    \
    struct NAME : Error {                                             \
        explicit NAME(const std::string& what = #NAME) : Error(what) {} \
    }

MINIVLM_DEFINE_ERROR(ShapeMismatch);
MINIVLM_DEFINE_ERROR(OddGrid);
MINIVLM_DEFINE_ERROR(NonFiniteInput);
MINIVLM_DEFINE_ERROR(NotScalarLoss);
MINIVLM_DEFINE_ERROR(IndivisibleImage);
MINIVLM_DEFINE_ERROR(DimMismatch);
MINIVLM_DEFINE_ERROR(EmptyManifest);
MINIVLM_DEFINE_ERROR(NegativeTimestamp);
MINIVLM_DEFINE_ERROR(EmptyTarget);
MINIVLM_DEFINE_ERROR(UnknownGroup);
MINIVLM_DEFINE_ERROR(EmptyDataset);
MINIVLM_DEFINE_ERROR(ClientFailure);
MINIVLM_DEFINE_ERROR(DuplicateSecond);
MINIVLM_DEFINE_ERROR(EmptyCaptions);
MINIVLM_DEFINE_ERROR(AmbiguousFilterResponse);
MINIVLM_DEFINE_ERROR(ParseError);
MINIVLM_DEFINE_ERROR(EmptyEvalSet);
MINIVLM_DEFINE_ERROR(IoError);

#undef MINIVLM_DEFINE_ERROR

}  // namespace minivlm
