#include <vector>

#include "taskemb/commands.hpp"

int main(int argc, char** argv) {
  return taskemb::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
