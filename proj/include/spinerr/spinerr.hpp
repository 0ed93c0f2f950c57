#pragma once

#include "spinerr/compensated_sum.hpp"
#include "spinerr/parallel.hpp"
#include "spinerr/spin.hpp"
#include "spinerr/sequences.hpp"
#include "spinerr/models.hpp"
#include "spinerr/estimate.hpp"
#include "spinerr/io.hpp"
