// SPDX-License-Identifier: Apache-2.0
#include "kdfip/cli.hpp"

int main(int argc, char **argv) { return kdfip::cli_dispatch(argc, argv); }
