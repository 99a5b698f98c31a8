#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <string>

// path of the mobiflow CLI binary, handed to us by ctest as argv[1]
std::string g_mobiflow_bin = "../mobiflow";

int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (!a.empty() && a[0] != '-') g_mobiflow_bin = a;
  }
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
