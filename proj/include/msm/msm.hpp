#pragma once

#include "msm/state_space.hpp"
#include "msm/sample_path.hpp"
#include "msm/cohort.hpp"
#include "msm/counting.hpp"
#include "msm/estimators.hpp"
#include "msm/cox_test.hpp"
#include "msm/logrank_test.hpp"
#include "msm/markov_tests.hpp"
#include "msm/random.hpp"
#include "msm/simulation.hpp"
#include "msm/weibull_fit.hpp"
#include "msm/truth.hpp"
#include "msm/metrics.hpp"
#include "msm/parallel.hpp"
#include "msm/study.hpp"
