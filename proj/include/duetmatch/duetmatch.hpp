#pragma once

#include "config.hpp"
#include "engine.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "mixing.hpp"
#include "network.hpp"
#include "report.hpp"
#include "volumes.hpp"
