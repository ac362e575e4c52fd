#include <doctest.h>

#include "fairseg/segmentor_zoo.hpp"

TEST_SUITE("segmentor_zoo") {}
