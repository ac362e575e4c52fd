#include <doctest.h>

#include "fairseg/training.hpp"

TEST_SUITE("training") {}
