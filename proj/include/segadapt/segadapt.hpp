#pragma once
// Convenience umbrella: pulls in the whole library.

#include "core.hpp"
#include "tensor.hpp"
#include "autodiff.hpp"
#include "prompts.hpp"
#include "augment.hpp"
#include "model.hpp"
#include "toy_model.hpp"
#include "png_io.hpp"
#include "lora.hpp"
#include "losses.hpp"
#include "data.hpp"
#include "eval.hpp"
#include "adapt.hpp"
#include "config.hpp"
