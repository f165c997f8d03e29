// Copyright 2026 The ser-forge Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "serforge/error.hpp"
#include "serforge/tensor.hpp"
#include "serforge/parameters.hpp"
#include "serforge/ops.hpp"
#include "serforge/layers.hpp"
#include "serforge/optim.hpp"
#include "serforge/serialization.hpp"
#include "serforge/audio.hpp"
#include "serforge/upstream.hpp"
#include "serforge/ecapa.hpp"
#include "serforge/downstream.hpp"
#include "serforge/model.hpp"
#include "serforge/trainer.hpp"
#include "serforge/metrics.hpp"
#include "serforge/dataset.hpp"
#include "serforge/experiment.hpp"
#include "serforge/synth.hpp"
#include "serforge/cli.hpp"
