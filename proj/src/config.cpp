#include "unet3p/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace unet3p {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<int>(r);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<std::uint64_t>(r);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

}  // namespace

SyntheticDatasetSpec RunConfig::train_data_spec() const {
    SyntheticDatasetSpec s;
    s.image_size = image_size;
    s.count = train_count;
    s.organ_fraction = organ_fraction;
    s.noise_sigma = noise_sigma;
    s.seed = data_seed;
    return s;
}

SyntheticDatasetSpec RunConfig::eval_data_spec() const {
    SyntheticDatasetSpec s;
    s.image_size = image_size;
    s.count = eval_count;
    s.organ_fraction = organ_fraction;
    s.noise_sigma = noise_sigma;
    s.seed = eval_seed != 0 ? eval_seed : mix_seed(data_seed, 0xE7A1);
    return s;
}

void RunConfig::validate() const {
    arch.validate();
    loss.validate();
    train.validate();
    if (image_size < 1) throw ConfigError("image_size must be >= 1");
    if (image_size % static_cast<int>(arch.min_input_size()) != 0) {
        throw ConfigError("image_size " + std::to_string(image_size) +
                          " must be divisible by 2^(depth-1) = " +
                          std::to_string(arch.min_input_size()));
    }
    if (train_count < 1) throw ConfigError("train_count must be >= 1");
    if (eval_count < 0) throw ConfigError("eval_count must be >= 0");
    if (organ_fraction < 0.0 || organ_fraction > 1.0) {
        throw ConfigError("organ_fraction must be in [0,1]");
    }
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key=value, got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");

        if (key == "variant") cfg.arch.variant = variant_from_name(value);
        else if (key == "depth") cfg.arch.depth = parse_int(key, value);
        else if (key == "base_channels") cfg.arch.base_channels = parse_int(key, value);
        else if (key == "skip_channels") cfg.arch.skip_channels = parse_int(key, value);
        else if (key == "kernel") cfg.arch.kernel = parse_int(key, value);
        else if (key == "input_channels") cfg.arch.input_channels = parse_int(key, value);
        else if (key == "deep_supervision") cfg.arch.deep_supervision = parse_bool(key, value);
        else if (key == "cgm") cfg.arch.cgm = parse_bool(key, value);
        else if (key == "dropout_rate") cfg.arch.dropout_rate = parse_double(key, value);
        else if (key == "focal_gamma") cfg.loss.focal_gamma = parse_double(key, value);
        else if (key == "msssim_scales") cfg.loss.msssim_scales = parse_int(key, value);
        else if (key == "msssim_window") cfg.loss.msssim_window = parse_int(key, value);
        else if (key == "msssim_sigma") cfg.loss.msssim_sigma = parse_double(key, value);
        else if (key == "learning_rate") cfg.train.learning_rate = parse_double(key, value);
        else if (key == "momentum") cfg.train.momentum = parse_double(key, value);
        else if (key == "epochs") cfg.train.epochs = parse_int(key, value);
        else if (key == "batch_size") cfg.train.batch_size = parse_int(key, value);
        else if (key == "cls_loss_weight") cfg.train.cls_loss_weight = parse_double(key, value);
        else if (key == "early_stop_dice") cfg.train.early_stop_dice = parse_double(key, value);
        else if (key == "seg_loss") {
            if (value == "hybrid") cfg.train.seg_loss = TrainConfig::SegLoss::hybrid;
            else if (value == "focal") cfg.train.seg_loss = TrainConfig::SegLoss::focal;
            else throw ConfigError("config key 'seg_loss': expected hybrid|focal, got '" + value + "'");
        }
        else if (key == "image_size") cfg.image_size = parse_int(key, value);
        else if (key == "train_count") cfg.train_count = parse_int(key, value);
        else if (key == "eval_count") cfg.eval_count = parse_int(key, value);
        else if (key == "organ_fraction") cfg.organ_fraction = parse_double(key, value);
        else if (key == "noise_sigma") cfg.noise_sigma = parse_double(key, value);
        else if (key == "arch_seed") cfg.arch_seed = parse_u64(key, value);
        else if (key == "data_seed") cfg.data_seed = parse_u64(key, value);
        else if (key == "eval_seed") cfg.eval_seed = parse_u64(key, value);
        else if (key == "train_seed") cfg.train_seed = parse_u64(key, value);
        else throw ConfigError("unknown config key '" + key + "'");
    }
    cfg.train.seed = cfg.train_seed;
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str());
}

std::string render_config(const RunConfig& cfg) {
    std::ostringstream os;
    char num[64];
    auto put_d = [&os, &num](const char* key, double v) {
        std::snprintf(num, sizeof(num), "%.17g", v);
        os << key << "=" << num << "\n";
    };
    os << "variant=" << variant_name(cfg.arch.variant) << "\n";
    os << "depth=" << cfg.arch.depth << "\n";
    os << "base_channels=" << cfg.arch.base_channels << "\n";
    os << "skip_channels=" << cfg.arch.skip_channels << "\n";
    os << "kernel=" << cfg.arch.kernel << "\n";
    os << "input_channels=" << cfg.arch.input_channels << "\n";
    os << "deep_supervision=" << (cfg.arch.deep_supervision ? "true" : "false") << "\n";
    os << "cgm=" << (cfg.arch.cgm ? "true" : "false") << "\n";
    put_d("dropout_rate", cfg.arch.dropout_rate);
    put_d("focal_gamma", cfg.loss.focal_gamma);
    os << "msssim_scales=" << cfg.loss.msssim_scales << "\n";
    os << "msssim_window=" << cfg.loss.msssim_window << "\n";
    put_d("msssim_sigma", cfg.loss.msssim_sigma);
    put_d("learning_rate", cfg.train.learning_rate);
    put_d("momentum", cfg.train.momentum);
    os << "epochs=" << cfg.train.epochs << "\n";
    os << "batch_size=" << cfg.train.batch_size << "\n";
    put_d("cls_loss_weight", cfg.train.cls_loss_weight);
    put_d("early_stop_dice", cfg.train.early_stop_dice);
    os << "seg_loss=" << (cfg.train.seg_loss == TrainConfig::SegLoss::hybrid ? "hybrid" : "focal")
       << "\n";
    os << "image_size=" << cfg.image_size << "\n";
    os << "train_count=" << cfg.train_count << "\n";
    os << "eval_count=" << cfg.eval_count << "\n";
    put_d("organ_fraction", cfg.organ_fraction);
    put_d("noise_sigma", cfg.noise_sigma);
    os << "arch_seed=" << cfg.arch_seed << "\n";
    os << "data_seed=" << cfg.data_seed << "\n";
    os << "eval_seed=" << cfg.eval_seed << "\n";
    os << "train_seed=" << cfg.train_seed << "\n";
    return os.str();
}

}  // namespace unet3p
