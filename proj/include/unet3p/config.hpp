#pragma once

#include <cstdint>
#include <string>

#include "unet3p/arch.hpp"
#include "unet3p/data.hpp"
#include "unet3p/losses.hpp"
#include "unet3p/train.hpp"

namespace unet3p {

// Everything a run needs, parsed from one plain-text key=value file.
// Unknown keys are an error; omitted keys take the defaults below.
struct RunConfig {
    ArchSpec arch;
    LossConfig loss;
    TrainConfig train;

    int image_size = 64;
    int train_count = 32;
    int eval_count = 16;
    double organ_fraction = 1.0;
    double noise_sigma = 0.05;

    std::uint64_t arch_seed = 1;
    std::uint64_t data_seed = 1;
    std::uint64_t eval_seed = 0;  // 0 = derive from data_seed
    std::uint64_t train_seed = 1;

    SyntheticDatasetSpec train_data_spec() const;
    SyntheticDatasetSpec eval_data_spec() const;
    void validate() const;
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

// every key, resolved to its effective value; re-parseable
std::string render_config(const RunConfig& cfg);

}  // namespace unet3p
