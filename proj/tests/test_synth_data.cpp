#include <doctest.h>

#include "fairseg/synth_data.hpp"

TEST_SUITE("synth_data") {}
