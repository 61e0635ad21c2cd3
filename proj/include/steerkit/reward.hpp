#pragma once

#include "steerkit/reward_ast.hpp"
#include "steerkit/reward_eval.hpp"
#include "steerkit/reward_parse.hpp"
