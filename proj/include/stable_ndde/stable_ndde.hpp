/*
 * Copyright 2026 The stable_ndde Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Everything except the command-line front end (cli.hpp).

#include "dataset.hpp"
#include "dde_core.hpp"
#include "errors.hpp"
#include "gp_history.hpp"
#include "io.hpp"
#include "ndde.hpp"
#include "nets.hpp"
#include "parallel.hpp"
#include "razumikhin.hpp"
#include "systems.hpp"
#include "tensor_ad.hpp"
#include "trainer.hpp"
