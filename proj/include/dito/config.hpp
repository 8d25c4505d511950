#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dito/data.hpp"
#include "dito/ovd.hpp"
#include "dito/pretrain.hpp"
#include "dito/text.hpp"
#include "dito/vit.hpp"

namespace dito {

// Flat experiment configuration: dotted keys ("finetune.lr") mapping to JSON
// leaves. Every key has a typed default; unknown keys and type mismatches are
// rejected with the offending key in the message.
class ExperimentConfig {
public:
    static ExperimentConfig defaults();
    // Defaults overlaid with a nested JSON file.
    static ExperimentConfig load(const std::filesystem::path& path);
    static ExperimentConfig from_json(const nlohmann::json& nested);

    // "key=value"; value parsed as JSON, or taken as a string for string keys.
    void set_override(const std::string& assignment);
    void set(const std::string& key, const nlohmann::json& value);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    int get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::string get_string(const std::string& key) const;
    std::vector<int> get_ints(const std::string& key) const;
    std::vector<double> get_doubles(const std::string& key) const;
    std::vector<std::string> get_strings(const std::string& key) const;

    // Builds every typed sub-configuration, throwing std::invalid_argument
    // that names the field on the first violated invariant.
    void validate() const;

    nlohmann::json nested() const;
    // Pretty nested JSON with sorted keys, used as the resolved snapshot.
    std::string dump() const;
    const std::map<std::string, nlohmann::json>& flat() const { return values_; }

private:
    const nlohmann::json& at(const std::string& key) const;
    std::map<std::string, nlohmann::json> values_;
};

// Typed views of the configuration.
data::SyntheticSpec synthetic_spec(const ExperimentConfig& cfg, data::Split split, std::uint64_t seed);
vit::ViTConfig pretrain_vit_config(const ExperimentConfig& cfg);
vit::ViTConfig detection_vit_config(const ExperimentConfig& cfg);
text::TextConfig text_config(const ExperimentConfig& cfg, int vocab_size);
dop::ScheduleOptions clip_schedule(const ExperimentConfig& cfg);
dop::ScheduleOptions dop_schedule(const ExperimentConfig& cfg);
dop::DopOptions dop_options(const ExperimentConfig& cfg, std::uint64_t seed);
ovd::DetectorConfig detector_config(const ExperimentConfig& cfg);
ovd::FinetuneSchedule finetune_schedule(const ExperimentConfig& cfg);
ovd::DetectOptions detect_options(const ExperimentConfig& cfg);

}  // namespace dito
