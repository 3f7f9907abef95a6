#pragma once

#include "ecpc/core.hpp"
#include "ecpc/codata.hpp"
#include "ecpc/response.hpp"
#include "ecpc/cox.hpp"
#include "ecpc/ridge_solver.hpp"
#include "ecpc/glm.hpp"
#include "ecpc/mom.hpp"
#include "ecpc/hypershrinkage.hpp"
#include "ecpc/estimator.hpp"
#include "ecpc/elastic_net.hpp"
#include "ecpc/selection.hpp"
#include "ecpc/metrics.hpp"
#include "ecpc/simulation.hpp"
#include "ecpc/io.hpp"
#include "ecpc/serialize.hpp"
