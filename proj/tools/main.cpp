// Copyright 2026 The cdlm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdlm/errors.hpp"
#include "commands.hpp"
#include "run_config.hpp"

namespace {

using cdlm::cli::RunConfig;

// Settings are applied in order: defaults, --config file, --key flags, --set.
struct Settings {
    std::string config_file;
    std::vector<std::string> overrides;
    std::map<std::string, std::string> flags;

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_file.empty()) cfg.load_file(config_file);
        for (const auto& [key, value] : flags) cfg.set(key, value);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw cdlm::ConfigError("--set expects key=value, got '" + kv + "'");
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        return cfg;
    }
};

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, Settings& settings) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", settings.config_file, "key=value config file");
    sub->add_option("--set", settings.overrides, "override one setting (key=value); repeatable");
    for (const auto& field : cdlm::cli::run_config_fields()) {
        const std::string key = field.key;
        sub->add_option_function<std::string>(
               "--" + key, [&settings, key](const std::string& v) { settings.flags[key] = v; }, field.help)
            ->type_name("VALUE");
    }
    return sub;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cdlm: causal-attention diffusion language model toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", cdlm::cli::build_id());

    Settings settings;
    auto* gen = add_command(app, "gen-corpus", "generate a synthetic corpus file", settings);
    auto* train = add_command(app, "train", "train a model on a corpus and save a checkpoint", settings);
    auto* decode = add_command(app, "decode", "decode prompts with a checkpoint", settings);
    auto* bench = add_command(app, "bench", "sweep decoding settings, streaming vs block-wise", settings);
    auto* dump = add_command(app, "mask-dump", "print the dual-stream attention pattern of a synthetic batch", settings);

    CLI11_PARSE(app, argc, argv);

    try {
        const auto cfg = settings.resolve();
        if (gen->parsed()) {
            cdlm::cli::run_gen_corpus(cfg, std::cout);
        } else if (train->parsed()) {
            cdlm::cli::run_train(cfg, std::cout);
        } else if (decode->parsed()) {
            cdlm::cli::run_decode(cfg, std::cout);
        } else if (bench->parsed()) {
            cdlm::cli::run_bench(cfg, std::cout);
        } else if (dump->parsed()) {
            cdlm::cli::run_mask_dump(cfg, std::cout);
        }
    } catch (const cdlm::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
