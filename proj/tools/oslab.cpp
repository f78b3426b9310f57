#include "oslab/harness.hpp"

int main(int argc, char** argv) { return oslab::harness::cli(argc, argv); }
