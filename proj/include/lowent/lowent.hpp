#pragma once

#include "lowent/detectors.hpp"
#include "lowent/errors.hpp"
#include "lowent/eval.hpp"
#include "lowent/features.hpp"
#include "lowent/navigator.hpp"
#include "lowent/rng.hpp"
#include "lowent/tagger.hpp"
#include "lowent/token_model.hpp"
#include "lowent/vocabulary.hpp"
#include "lowent/watermark.hpp"

namespace lowent {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace lowent
