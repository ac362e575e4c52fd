#include <doctest.h>

#include "fairseg/reporting.hpp"

TEST_SUITE("reporting") {}
