#include <iostream>
#include <string>
#include <vector>

#include "homeostat/cli.hpp"

int main(int argc, char** argv) {
  return homeostat::run_cli(std::vector<std::string>(argv, argv + argc),
                            std::cout, std::cerr);
}
