#include <doctest.h>

#include "fairseg/fairness_metrics.hpp"

TEST_SUITE("fairness_metrics") {}
