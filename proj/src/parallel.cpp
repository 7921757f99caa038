#include "dcn2/parallel.hpp"

#include <cstdlib>
#include <string>

namespace dcn2 {

Execution Execution::from_env() {
  Execution exec;
  if (const char* env = std::getenv("DCN2_THREADS")) {
    try {
      exec.threads = std::max(1, std::stoi(env));
    } catch (...) {
      exec.threads = 1;
    }
  }
  return exec;
}

}  // namespace dcn2
