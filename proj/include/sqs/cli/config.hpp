#pragma once

#include "sqs/finetune/finetune.hpp"
#include "sqs/pretrain/pretrain.hpp"
#include "sqs/scene/scene.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace sqs::cli {

using json = nlohmann::json;

struct KeySpec {
    std::string key;  // dotted path, e.g. "opt.lr_peak"
    json default_value;
    std::string doc;
};

// Every accepted key with its default, in documentation order.
const std::vector<KeySpec>& config_keys();

// Flat dotted-key configuration. Unknown keys and type changes are rejected
// with ConfigError naming the key.
class RunConfig {
public:
    RunConfig();

    // Nested JSON document; every leaf must be a known key.
    void merge_document(const json& doc, const std::string& origin);
    void merge_file(const std::filesystem::path& path);
    // "key=value"; value parsed as JSON, else taken as a string.
    void apply_assignment(const std::string& assignment);
    void set(const std::string& key, json value);
    bool explicitly_set(const std::string& key) const { return explicit_.count(key) != 0; }

    const json& get(const std::string& key) const;
    double number(const std::string& key) const { return get(key).get<double>(); }
    std::int64_t integer(const std::string& key) const { return get(key).get<std::int64_t>(); }
    std::size_t count(const std::string& key) const;
    bool flag(const std::string& key) const { return get(key).get<bool>(); }
    std::string text(const std::string& key) const { return get(key).get<std::string>(); }

    // Nested document with every key, pretty-printed with sorted keys.
    std::string resolved() const;

    std::uint64_t seed() const;
    std::uint64_t train_seed() const;
    scene::SceneConfig scene_config() const;
    pretrain::PretrainConfig pretrain_config() const;
    finetune::FinetuneConfig finetune_config() const;
    // Throws ConfigError on the first invalid value.
    void validate() const;

private:
    std::map<std::string, json> values_;
    std::map<std::string, std::string> explicit_;
};

} // namespace sqs::cli
