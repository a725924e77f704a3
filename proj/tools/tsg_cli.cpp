#include "tsg/harness.hpp"

int main(int argc, char** argv) { return tsg::harness::cli(argc, argv); }
