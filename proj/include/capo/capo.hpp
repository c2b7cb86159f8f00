#pragma once

#include "capo/checkpoint.hpp"
#include "capo/config.hpp"
#include "capo/curation.hpp"
#include "capo/dataset_io.hpp"
#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/eval.hpp"
#include "capo/harness.hpp"
#include "capo/judge.hpp"
#include "capo/optimizer.hpp"
#include "capo/policy.hpp"
#include "capo/random.hpp"
#include "capo/remote_judge.hpp"
#include "capo/rewards.hpp"
#include "capo/trainer.hpp"
