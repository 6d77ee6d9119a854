#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "fume/common.hpp"
#include "fume/loss.hpp"
#include "fume/network.hpp"

namespace fume {

// Flat `key = value` text, one pair per line, '#' starts a comment.
inline std::map<std::string, std::string> parse_key_values(std::istream& is) {
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        std::size_t b = s.find_first_not_of(" \t\r");
        std::size_t e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (out.count(key))
            throw ConfigError("duplicate config key: " + key);
        out[key] = val;
    }
    return out;
}

struct TrainConfig {
    double lr = 1e-3;
    int batch_size = 16;
    int epochs = 20;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::uint64_t seed = 42;
    Variant variant = Variant::Fume;
    std::string dataset = "data";
    std::string out_dir = "out";
    int size = 64;            // frame extent for generate/train/eval
    int samples_per_ph = 143; // generate: per pH level (6 levels)
    int bench_size = 64;      // input extent for the latency protocol
    bool augment = true;
    LossConfig loss;

    void validate() const {
        if (lr <= 0) throw ConfigError("lr must be positive");
        if (batch_size <= 0) throw ConfigError("batch_size must be positive");
        if (epochs <= 0) throw ConfigError("epochs must be positive");
        if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
        if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
            throw ConfigError("betas must lie in (0, 1)");
        if (size <= 0 || size % 32) throw ConfigError("size must be a positive multiple of 32");
        if (bench_size <= 0 || bench_size % 32)
            throw ConfigError("bench_size must be a positive multiple of 32");
        if (samples_per_ph < 10) throw ConfigError("samples_per_ph must be at least 10");
        loss.validate();
    }

    static TrainConfig from_stream(std::istream& is) {
        auto kv = parse_key_values(is);
        TrainConfig c;
        auto to_double = [](const std::string& k, const std::string& v) {
            try {
                std::size_t pos;
                double d = std::stod(v, &pos);
                if (pos != v.size()) throw std::invalid_argument(v);
                return d;
            } catch (const std::exception&) {
                throw ConfigError("bad numeric value for " + k + ": " + v);
            }
        };
        auto to_int = [&](const std::string& k, const std::string& v) {
            double d = to_double(k, v);
            if (d != static_cast<int>(d))
                throw ConfigError("expected integer for " + k + ": " + v);
            return static_cast<int>(d);
        };
        auto to_bool = [](const std::string& k, const std::string& v) {
            if (v == "1" || v == "true") return true;
            if (v == "0" || v == "false") return false;
            throw ConfigError("expected boolean (0/1/true/false) for " + k + ": " + v);
        };
        for (const auto& [k, v] : kv) {
            if (k == "lr") c.lr = to_double(k, v);
            else if (k == "batch_size") c.batch_size = to_int(k, v);
            else if (k == "epochs") c.epochs = to_int(k, v);
            else if (k == "weight_decay") c.weight_decay = to_double(k, v);
            else if (k == "beta1") c.beta1 = to_double(k, v);
            else if (k == "beta2") c.beta2 = to_double(k, v);
            else if (k == "seed") c.seed = static_cast<std::uint64_t>(to_double(k, v));
            else if (k == "variant") c.variant = parse_variant(v);
            else if (k == "dataset") c.dataset = v;
            else if (k == "out") c.out_dir = v;
            else if (k == "size") c.size = to_int(k, v);
            else if (k == "samples_per_ph") c.samples_per_ph = to_int(k, v);
            else if (k == "bench_size") c.bench_size = to_int(k, v);
            else if (k == "augment") c.augment = to_bool(k, v);
            else if (k == "lambda") c.loss.lambda = to_double(k, v);
            else if (k == "focal_gamma") c.loss.focal_gamma = to_double(k, v);
            else if (k == "dice_smooth") c.loss.dice_smooth = to_double(k, v);
            else throw ConfigError("unknown config key: " + k);
        }
        c.validate();
        return c;
    }

    static TrainConfig from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file: " + path);
        return from_stream(is);
    }
};

}  // namespace fume
