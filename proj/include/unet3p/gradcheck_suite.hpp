#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace unet3p {

// Finite-difference verification of every differentiable op, every loss, and
// one end-to-end tiny network. Shared by the CLI verb and the acceptance run.
struct SuiteOptions {
    std::uint64_t seed = 7;
    int rounds = 10;          // random seeds per item
    double step = 1e-5;
    double tolerance = 1e-4;
    bool inject_conv_bug = false;  // self-test: corrupt conv2d's analytic grad
};

struct SuiteItem {
    std::string name;
    double worst_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

std::vector<SuiteItem> run_gradcheck_suite(const SuiteOptions& opt);
std::string render_suite(const std::vector<SuiteItem>& items);
bool suite_passed(const std::vector<SuiteItem>& items);

}  // namespace unet3p
