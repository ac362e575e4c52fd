#include <doctest.h>

#include "fairseg/data_model.hpp"

TEST_SUITE("data_model") {}
