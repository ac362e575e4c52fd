#include <doctest.h>

#include "fairseg/apple_core.hpp"

TEST_SUITE("apple_core") {}
