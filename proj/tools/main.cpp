#include "cli.hpp"

int main(int argc, char** argv) {
  return xmodal::cli::dispatch(std::vector<std::string>(argv, argv + argc));
}
