// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Umbrella header for the library. The command layer (config, commands, cli)
// pulls in Boost, nlohmann/json and CLI11 and is included separately.

#pragma once

#include "amfd/attention.hpp"
#include "amfd/boxes.hpp"
#include "amfd/error.hpp"
#include "amfd/fusion.hpp"
#include "amfd/gradcheck.hpp"
#include "amfd/io.hpp"
#include "amfd/mea.hpp"
#include "amfd/metrics.hpp"
#include "amfd/optim.hpp"
#include "amfd/rng.hpp"
#include "amfd/tensor.hpp"
#include "amfd/toynet/detection.hpp"
#include "amfd/toynet/scene.hpp"
#include "amfd/toynet/student.hpp"
#include "amfd/toynet/teacher.hpp"
#include "amfd/toynet/train.hpp"
