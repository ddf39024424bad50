#pragma once

#include "nhmm/alignment.hpp"
#include "nhmm/brute_force.hpp"
#include "nhmm/checkpoint.hpp"
#include "nhmm/datasets.hpp"
#include "nhmm/encoder.hpp"
#include "nhmm/fullsum_lattice.hpp"
#include "nhmm/label_topology.hpp"
#include "nhmm/optimizer.hpp"
#include "nhmm/trainer.hpp"
#include "nhmm/transition_model.hpp"
