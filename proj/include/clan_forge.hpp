#pragma once

#include "clan_forge/autodiff.hpp"
#include "clan_forge/common.hpp"
#include "clan_forge/data_synth.hpp"
#include "clan_forge/export.hpp"
#include "clan_forge/grad_check.hpp"
#include "clan_forge/labels.hpp"
#include "clan_forge/losses.hpp"
#include "clan_forge/metrics.hpp"
#include "clan_forge/models.hpp"
#include "clan_forge/optim.hpp"
#include "clan_forge/run_record.hpp"
#include "clan_forge/sweep.hpp"
#include "clan_forge/tensor.hpp"
#include "clan_forge/trainer.hpp"
