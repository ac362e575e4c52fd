#include <doctest.h>

#include "fairseg/cli_commands.hpp"

TEST_SUITE("cli") {}
