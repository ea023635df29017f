#include "sqs/cli/config.hpp"

#include "sqs/core/error.hpp"
#include "sqs/io/binary.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace sqs::cli {

const std::vector<KeySpec>& config_keys() {
    static const std::vector<KeySpec> keys = {
        {"seed", 0, "global seed; SQS_SEED is used when neither the file nor a flag sets it"},
        {"out_dir", "runs/out", "output directory of the command"},
        {"data.dir", "data", "dataset root holding scenes/<id>"},
        {"data.n_scenes", 8, "scenes written by gen-data"},
        {"data.n_objects", 3, "objects per scene"},
        {"data.n_views", 4, "ring cameras per scene"},
        {"data.width", 64, "image width, a multiple of 32"},
        {"data.height", 64, "image height, a multiple of 32"},
        {"data.gaussians_per_object", 96, "surface Gaussians per object"},
        {"data.keep_rate", 0.5, "fraction of valid depth pixels kept as sparse supervision"},
        {"data.bounds_min", json::array({-1.0, -1.0, -1.0}), "scene box minimum corner (m)"},
        {"data.bounds_max", json::array({1.0, 1.0, 1.0}), "scene box maximum corner (m)"},
        {"data.ring_radius", 1.6, "camera ring radius in multiples of the scene extent"},
        {"data.ring_height", 0.45, "camera height above the centre in multiples of the extent"},
        {"data.fov_degrees", 55.0, "horizontal field of view"},
        {"model.queries", 512, "Gaussian queries K"},
        {"model.decoder_layers", 2, "refinement layers"},
        {"model.offsets", 4, "deformable sampling offsets per query"},
        {"model.heads", 4, "attention heads"},
        {"model.feature_dim", 64, "query feature width D"},
        {"model.ffn_hidden", 128, "feed-forward hidden width"},
        {"model.head_hidden", 64, "Gaussian head hidden width"},
        {"model.voxel_size", 0.0, "sparse-conv voxel edge (m); 0 selects extent / 32"},
        {"model.neck_width", 32, "feature pyramid width"},
        {"model.scale_min", 0.001, "smallest scale, fraction of the extent"},
        {"model.scale_max", 0.25, "largest scale, fraction of the extent"},
        {"model.init_scale", 0.02, "initial scale, fraction of the extent"},
        {"model.init_opacity", 0.1, "initial opacity"},
        {"loss.w_rgb", 1.0, "RGB L1 weight"},
        {"loss.w_depth", 0.05, "masked depth L1 weight"},
        {"opt.lr_peak", 2e-4, "peak learning rate"},
        {"opt.warmup_steps", 500, "linear warmup steps"},
        {"opt.weight_decay", 0.01, "decoupled weight decay"},
        {"train.steps", 2000, "pre-training steps"},
        {"train.seed", -1, "pre-training seed; -1 uses seed"},
        {"train.checkpoint_every", 500, "periodic checkpoint interval; 0 disables"},
        {"train.snapshot_every", 500, "rendered snapshot interval; 0 disables"},
        {"train.resume", "", "checkpoint to resume from"},
        {"aug.hflip_prob", 0.5, "probability of a horizontal flip per step"},
        {"render.checkpoint", "", "pre-trained checkpoint for render"},
        {"render.scene", "", "scene directory for render; empty selects the first dataset scene"},
        {"finetune.pretrained", "", "pre-trained checkpoint (required)"},
        {"finetune.interaction", true, "use query interaction"},
        {"finetune.paired", false, "also run the no-interaction baseline"},
        {"finetune.k", 8, "neighbours per task query"},
        {"finetune.alpha_thresh", 0.05, "opacity threshold for pre-trained anchors"},
        {"finetune.grid", 16, "occupancy grid edge G"},
        {"finetune.task_dim", 64, "task query width"},
        {"finetune.head_hidden", 64, "occupancy head hidden width"},
        {"finetune.lr_peak", 1e-3, "fine-tune peak learning rate"},
        {"finetune.warmup_steps", 50, "fine-tune warmup steps"},
        {"finetune.weight_decay", 0.01, "fine-tune weight decay"},
        {"finetune.steps", 500, "fine-tune steps"},
        {"finetune.train_fraction", 1.0, "fraction of training scenes used"},
        {"finetune.eval_fraction", 0.25, "fraction of scenes held out for eval (last scenes)"},
        {"eval.task", "", "fine-tuned task checkpoint for eval"},
        {"eval.perfect", false, "score the ground truth against itself"},
        {"gradcheck.fault", "", "component whose analytic gradient is negated (test hook)"},
    };
    return keys;
}

namespace {

const KeySpec* find_key(const std::string& key) {
    for (const auto& k : config_keys())
        if (k.key == key) return &k;
    return nullptr;
}

bool compatible(const json& want, const json& got) {
    if (want.is_number()) {
        if (!got.is_number()) return false;
        if (want.is_number_integer()) return got.is_number_integer() || (got.get<double>() == std::floor(got.get<double>()));
        return true;
    }
    if (want.is_array()) return got.is_array() && got.size() == want.size() &&
                                std::all_of(got.begin(), got.end(), [](const json& v) { return v.is_number(); });
    return want.type() == got.type();
}

void flatten(const json& doc, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
    if (doc.is_object()) {
        for (auto it = doc.begin(); it != doc.end(); ++it) {
            const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
            if (it.value().is_object()) flatten(it.value(), key, out);
            else out.emplace_back(key, it.value());
        }
        return;
    }
    out.emplace_back(prefix, doc);
}

} // namespace

RunConfig::RunConfig() {
    for (const auto& k : config_keys()) values_[k.key] = k.default_value;
}

void RunConfig::set(const std::string& key, json value) {
    const KeySpec* spec = find_key(key);
    if (!spec) throw ConfigError("unknown config key '" + key + "'");
    if (!compatible(spec->default_value, value))
        throw ConfigError("config key '" + key + "' expects " + spec->default_value.type_name() + ", got " +
                          value.dump());
    if (spec->default_value.is_number_integer() && !value.is_number_integer())
        value = static_cast<std::int64_t>(value.get<double>());
    values_[key] = std::move(value);
    explicit_[key] = "set";
}

void RunConfig::merge_document(const json& doc, const std::string& origin) {
    if (!doc.is_object()) throw ConfigError(origin + ": config document must be an object");
    std::vector<std::pair<std::string, json>> leaves;
    flatten(doc, "", leaves);
    for (auto& [key, value] : leaves) {
        try {
            set(key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ": " + e.what());
        }
    }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    merge_document(doc, path.string());
}

void RunConfig::apply_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    set(key, std::move(value));
}

const json& RunConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

std::size_t RunConfig::count(const std::string& key) const {
    const auto v = integer(key);
    if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
}

std::string RunConfig::resolved() const {
    json doc = json::object();
    for (const auto& [key, value] : values_) doc[json::json_pointer("/" + [&] {
        std::string p = key;
        std::replace(p.begin(), p.end(), '.', '/');
        return p;
    }())] = value;
    return doc.dump(2) + "\n";
}

std::uint64_t RunConfig::seed() const {
    const auto s = integer("seed");
    if (s < 0) throw ConfigError("config key 'seed' must be non-negative");
    return static_cast<std::uint64_t>(s);
}

std::uint64_t RunConfig::train_seed() const {
    const auto s = integer("train.seed");
    return s < 0 ? seed() : static_cast<std::uint64_t>(s);
}

scene::SceneConfig RunConfig::scene_config() const {
    scene::SceneConfig c;
    c.n_objects = static_cast<int>(count("data.n_objects"));
    c.n_views = static_cast<int>(count("data.n_views"));
    c.width = static_cast<int>(count("data.width"));
    c.height = static_cast<int>(count("data.height"));
    c.gaussians_per_object = static_cast<int>(count("data.gaussians_per_object"));
    for (int a = 0; a < 3; ++a) {
        c.bounds.min[a] = get("data.bounds_min")[a].get<double>();
        c.bounds.max[a] = get("data.bounds_max")[a].get<double>();
    }
    c.ring_radius = number("data.ring_radius");
    c.ring_height = number("data.ring_height");
    c.fov_degrees = number("data.fov_degrees");
    return c;
}

pretrain::PretrainConfig RunConfig::pretrain_config() const {
    pretrain::PretrainConfig c;
    c.encoder.neck_width = count("model.neck_width");
    auto& d = c.decoder;
    d.K = count("model.queries");
    d.n_layers = count("model.decoder_layers");
    d.n_offsets = count("model.offsets");
    d.n_heads = count("model.heads");
    d.feature_dim = count("model.feature_dim");
    d.ffn_hidden = count("model.ffn_hidden");
    d.head_hidden = count("model.head_hidden");
    d.voxel_size = number("model.voxel_size");
    d.scale_min = number("model.scale_min");
    d.scale_max = number("model.scale_max");
    d.init_scale = number("model.init_scale");
    d.init_opacity = number("model.init_opacity");
    c.loss.w_rgb = number("loss.w_rgb");
    c.loss.w_depth = number("loss.w_depth");
    c.lr_peak = number("opt.lr_peak");
    c.warmup_steps = count("opt.warmup_steps");
    c.weight_decay = number("opt.weight_decay");
    c.steps = count("train.steps");
    c.seed = train_seed();
    c.hflip_prob = number("aug.hflip_prob");
    return c;
}

finetune::FinetuneConfig RunConfig::finetune_config() const {
    finetune::FinetuneConfig c;
    c.interaction.k = count("finetune.k");
    c.interaction.alpha_thresh = number("finetune.alpha_thresh");
    c.use_interaction = flag("finetune.interaction");
    c.grid = count("finetune.grid");
    c.task_dim = count("finetune.task_dim");
    c.head_hidden = count("finetune.head_hidden");
    c.lr_peak = number("finetune.lr_peak");
    c.warmup_steps = count("finetune.warmup_steps");
    c.weight_decay = number("finetune.weight_decay");
    c.steps = count("finetune.steps");
    c.seed = seed();
    c.train_fraction = number("finetune.train_fraction");
    return c;
}

void RunConfig::validate() const {
    seed();
    const auto sc = scene_config();
    sc.bounds.validate();
    if (sc.n_views < 1 || sc.n_objects < 1 || sc.gaussians_per_object < 1)
        throw ConfigError("data.n_views, data.n_objects and data.gaussians_per_object must be positive");
    if (sc.width < 32 || sc.height < 32 || sc.width % 32 != 0 || sc.height % 32 != 0)
        throw ConfigError("data.width and data.height must be positive multiples of 32");
    const double keep = number("data.keep_rate");
    if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError("data.keep_rate must lie in (0,1]");
    if (count("data.n_scenes") < 1) throw ConfigError("data.n_scenes must be at least 1");
    pretrain_config().validate();
    finetune_config().validate();
    const double ef = number("finetune.eval_fraction");
    if (!(ef >= 0.0 && ef < 1.0)) throw ConfigError("finetune.eval_fraction must lie in [0,1)");
    const auto fault = text("gradcheck.fault");
    if (!fault.empty() && fault != "renderer" && fault != "decoder" && fault != "interaction")
        throw ConfigError("gradcheck.fault must be empty, renderer, decoder or interaction");
}

} // namespace sqs::cli
