#pragma once

// Stage orchestration behind the `evmorph` command line.
//
// Configuration precedence, highest first: command-line flags (--threads, --seed, --out),
// then manifest values, then built-in defaults. Input paths written in the manifest
// resolve against the manifest's directory. Omitted inputs default to the artifacts an
// earlier stage writes inside the output directory, so `synth`, `aggregate`, `train`
// and `eval` chain with a manifest that only configures them.

#include <Eigen/Core>

#include <charconv>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "evmorph/error.hpp"
#include "evmorph/events.hpp"
#include "evmorph/face3d.hpp"
#include "evmorph/fitting.hpp"
#include "evmorph/stvit.hpp"
#include "evmorph/synth.hpp"
#include "evmorph/training.hpp"

namespace evmorph {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

/// Carries every configuration problem found, not just the first.
class ValidationError : public InvalidArgument {
public:
    explicit ValidationError(std::vector<std::string> problems)
        : InvalidArgument(join(problems)), problems_(std::move(problems)) {}
    const std::vector<std::string>& problems() const { return problems_; }

private:
    static std::string join(const std::vector<std::string>& p) {
        std::string s;
        for (const auto& x : p) s += (s.empty() ? "" : "; ") + x;
        return s;
    }
    std::vector<std::string> problems_;
};

/// A required input file is absent; reports the first one found.
class MissingInputError : public ValidationError {
public:
    explicit MissingInputError(const fs::path& p) : ValidationError({"missing input: " + p.string()}), path_(p) {}
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

enum class Stage { Build3dmm, Fit, Aggregate, Synth, Train, Eval, Bench };

inline const std::vector<std::pair<std::string, Stage>>& stage_names() {
    static const std::vector<std::pair<std::string, Stage>> names = {
        {"build-3dmm", Stage::Build3dmm}, {"fit", Stage::Fit},     {"aggregate", Stage::Aggregate}, {"synth", Stage::Synth},
        {"train", Stage::Train},          {"eval", Stage::Eval},   {"bench", Stage::Bench}};
    return names;
}

inline std::string to_string(Stage s) {
    for (const auto& [n, v] : stage_names())
        if (v == s) return n;
    return "?";
}

inline Stage parse_stage(const std::string& name) {
    for (const auto& [n, v] : stage_names())
        if (n == name) return v;
    throw ValidationError({"unknown stage '" + name + "'"});
}

/// Per-stage seed derived from the single top-level seed.
inline std::uint64_t stage_seed(std::uint64_t seed, Stage s) { return derive_seed(seed, 0x5000 + static_cast<std::uint64_t>(s)); }

// ---- manifest -------------------------------------------------------------------------------

/// A path as written in the manifest (echoed verbatim) and as resolved on disk.
struct ConfigPath {
    std::string raw;
    fs::path resolved;
};

struct ExpressionEntry {
    ConfigPath expressive, neutral;
    std::string au;
};

struct Build3dmmSection {
    std::vector<ConfigPath> neutral_meshes;
    std::vector<ExpressionEntry> expressions;
    int id_components = 8;
    DictionaryOptions dictionary;
};

struct FitSection {
    ConfigPath id_model, au_model, landmark_ids, landmarks_manifest;
    FitConfig config;
};

struct AggregateSection {
    ConfigPath events_manifest;
    std::uint64_t delta_t = kDefaultDeltaT;
};

struct TrainSection {
    ConfigPath dataset, checkpoint;
    TrainConfig config;
};

struct EvalSection {
    ConfigPath dataset, checkpoint;
    std::string split = "test";
};

struct BenchSection {
    ConfigPath checkpoint;  // empty raw: a freshly initialised model
    int repeats = 5;
    int chunk_frames = 30;
    int sensor_size = 32;
};

struct PipelineManifest {
    fs::path manifest_dir;
    fs::path out_dir;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    Build3dmmSection build;
    FitSection fit;
    AggregateSection aggregate;
    SynthSpec synth;
    ModelConfig model;
    TrainSection train;
    EvalSection eval;
    BenchSection bench;
};

struct CliOverrides {
    std::optional<unsigned> threads;
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> out;
};

namespace detail {

/// Reads typed fields from one JSON object, recording every problem it meets.
class SectionReader {
public:
    SectionReader(const json& root, std::string name, std::vector<std::string>& errors)
        : name_(std::move(name)), errors_(errors) {
        if (name_.empty()) {
            obj_ = &root;
        } else if (root.contains(name_)) {
            obj_ = &root.at(name_);
        }
        if (obj_ != nullptr && !obj_->is_object()) {
            errors_.push_back(where("") + "must be an object");
            obj_ = nullptr;
        }
    }

    template <class T>
    void field(const std::string& key, T& out) {
        const json* v = take(key);
        if (v == nullptr) return;
        if constexpr (std::is_same_v<T, bool>) {
            if (!v->is_boolean()) return bad(key, "a boolean");
            out = v->get<bool>();
        } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
            if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0))
                return bad(key, "a non-negative integer");
            out = v->get<T>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v->is_number_integer()) return bad(key, "an integer");
            out = v->get<T>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v->is_number()) return bad(key, "a number");
            out = v->get<T>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v->is_string()) return bad(key, "a string");
            out = v->get<std::string>();
        } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
            if (!v->is_array() || !std::all_of(v->begin(), v->end(), [](const json& x) { return x.is_string(); }))
                return bad(key, "an array of strings");
            out = v->get<std::vector<std::string>>();
        } else {
            static_assert(sizeof(T) == 0, "unsupported field type");
        }
    }

    /// A path relative to `base`; `fallback` (relative to `fallback_base`) when omitted.
    void path(const std::string& key, ConfigPath& out, const fs::path& base, const std::string& fallback,
              const fs::path& fallback_base) {
        std::string raw;
        field(key, raw);
        if (!raw.empty()) {
            out = {raw, base / raw};
        } else {
            out = {fallback.empty() ? "" : "<out>/" + fallback, fallback.empty() ? fs::path() : fallback_base / fallback};
        }
    }

    const json* raw(const std::string& key) { return take(key); }

    void error(const std::string& key, const std::string& message) { errors_.push_back(where(key) + message); }

    /// Unknown keys are errors so that typos do not silently fall back to defaults.
    void finish() {
        if (obj_ == nullptr) return;
        for (const auto& [k, v] : obj_->items())
            if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) errors_.push_back(where(k) + "unknown key");
    }

private:
    const json* take(const std::string& key) {
        seen_.push_back(key);
        if (obj_ == nullptr || !obj_->contains(key)) return nullptr;
        return &obj_->at(key);
    }
    void bad(const std::string& key, const char* what) { errors_.push_back(where(key) + "must be " + what); }
    std::string where(const std::string& key) const {
        std::string s = name_;
        if (!key.empty()) s += (s.empty() ? "" : ".") + key;
        return s.empty() ? "" : s + ": ";
    }

    std::string name_;
    std::vector<std::string>& errors_;
    const json* obj_ = nullptr;
    std::vector<std::string> seen_;
};

inline void read_model(const json& root, ModelConfig& m, std::vector<std::string>& errors) {
    SectionReader r(root, "model", errors);
    r.field("image_size", m.image_size);
    r.field("in_channels", m.in_channels);
    r.field("patch_size", m.patch_size);
    r.field("embed_dim", m.embed_dim);
    r.field("spatial_depth", m.spatial_depth);
    r.field("temporal_depth", m.temporal_depth);
    r.field("heads", m.heads);
    r.field("mlp_ratio", m.mlp_ratio);
    r.field("num_classes", m.num_classes);
    r.field("alpha_dim", m.alpha_dim);
    r.field("seq_len", m.seq_len);
    r.field("regression_hidden", m.regression_hidden);
    r.finish();
}

inline void read_synth(const json& root, SynthSpec& s, std::vector<std::string>& errors) {
    SectionReader r(root, "synth", errors);
    r.field("n_classes", s.n_classes);
    r.field("n_videos_per_class", s.n_videos_per_class);
    r.field("seq_len", s.seq_len);
    r.field("K", s.K);
    r.field("id_components", s.id_components);
    r.field("mesh_size", s.mesh_size);
    r.field("noise_sigma", s.noise_sigma);
    r.field("sensor_size", s.sensor_size);
    r.field("image_size", s.image_size);
    r.field("events_per_frame", s.events_per_frame);
    r.field("test_fraction", s.test_fraction);
    r.field("lambda", s.lambda_reg);
    r.finish();
}

}  // namespace detail

/// Builds the effective manifest from parsed JSON; throws ValidationError listing every problem.
inline PipelineManifest parse_manifest(const json& root, const fs::path& manifest_dir, const CliOverrides& overrides = {}) {
    std::vector<std::string> errors;
    PipelineManifest m;
    m.manifest_dir = manifest_dir;
    if (!root.is_object()) throw ValidationError({"manifest must be a JSON object"});

    detail::SectionReader top(root, "", errors);
    std::string out_raw = "evmorph_out";
    top.field("out", out_raw);
    top.field("seed", m.seed);
    top.field("threads", m.threads);
    for (const char* section : {"build_3dmm", "fit", "aggregate", "synth", "model", "train", "eval", "bench"}) (void)top.raw(section);
    top.finish();
    if (overrides.seed) m.seed = *overrides.seed;
    if (overrides.threads) m.threads = *overrides.threads;
    m.out_dir = overrides.out ? *overrides.out : manifest_dir / out_raw;
    if (m.threads < 1) errors.emplace_back("threads must be >= 1");
    const fs::path& base = manifest_dir;
    const fs::path& out = m.out_dir;

    {
        detail::SectionReader r(root, "build_3dmm", errors);
        std::vector<std::string> meshes;
        r.field("neutral_meshes", meshes);
        for (const auto& p : meshes) m.build.neutral_meshes.push_back({p, base / p});
        if (const json* ex = r.raw("expressions")) {
            if (!ex->is_array()) {
                r.error("expressions", "must be an array");
            } else {
                for (std::size_t i = 0; i < ex->size(); ++i) {
                    const json& e = (*ex)[i];
                    std::vector<std::string> sub;
                    detail::SectionReader er(json{{"e", e}}, "e", sub);
                    ExpressionEntry entry;
                    std::string expressive, neutral;
                    er.field("expressive", expressive);
                    er.field("neutral", neutral);
                    er.field("au", entry.au);
                    er.finish();
                    if (expressive.empty() || neutral.empty()) sub.emplace_back("e: needs 'expressive' and 'neutral' paths");
                    for (auto& s : sub) errors.push_back("build_3dmm.expressions[" + std::to_string(i) + "]" + s.substr(1));
                    entry.expressive = {expressive, base / expressive};
                    entry.neutral = {neutral, base / neutral};
                    m.build.expressions.push_back(std::move(entry));
                }
            }
        }
        r.field("id_components", m.build.id_components);
        if (const json* d = r.raw("dictionary")) {
            detail::SectionReader dr(json{{"build_3dmm.dictionary", *d}}, "build_3dmm.dictionary", errors);
            dr.field("num_atoms", m.build.dictionary.num_atoms);
            dr.field("sparsity", m.build.dictionary.sparsity);
            dr.field("iterations", m.build.dictionary.iterations);
            dr.finish();
        }
        r.finish();
        if (m.build.id_components < 1) errors.emplace_back("build_3dmm.id_components must be >= 1");
        if (m.build.dictionary.num_atoms < 1) errors.emplace_back("build_3dmm.dictionary.num_atoms must be >= 1");
        if (m.build.dictionary.sparsity < 1) errors.emplace_back("build_3dmm.dictionary.sparsity must be >= 1");
        if (m.build.dictionary.iterations < 0) errors.emplace_back("build_3dmm.dictionary.iterations must be >= 0");
    }
    {
        detail::SectionReader r(root, "fit", errors);
        r.path("id_model", m.fit.id_model, base, "id_model.m3dm", out);
        r.path("au_model", m.fit.au_model, base, "au_model.m3dm", out);
        r.path("landmark_ids", m.fit.landmark_ids, base, "landmark_ids.txt", out);
        r.path("landmarks_manifest", m.fit.landmarks_manifest, base, "synth/landmarks.csv", out);
        r.field("lambda", m.fit.config.lambda_reg);
        r.field("normalize_scale", m.fit.config.normalize_scale);
        r.field("camera_refinements", m.fit.config.camera_refinements);
        r.field("refinement_tolerance", m.fit.config.refinement_tolerance);
        r.finish();
        for (auto& e : m.fit.config.validate()) errors.push_back(std::move(e));
    }
    {
        detail::SectionReader r(root, "aggregate", errors);
        r.path("events_manifest", m.aggregate.events_manifest, base, "synth/events.csv", out);
        r.field("delta_t", m.aggregate.delta_t);
        r.finish();
        if (m.aggregate.delta_t == 0) errors.emplace_back("aggregate.delta_t must be > 0");
    }
    detail::read_synth(root, m.synth, errors);
    m.synth.seed = stage_seed(m.seed, Stage::Synth);
    for (auto& e : m.synth.validate()) errors.push_back(std::move(e));

    detail::read_model(root, m.model, errors);
    for (auto& e : m.model.validate()) errors.push_back(std::move(e));
    {
        detail::SectionReader r(root, "train", errors);
        r.path("dataset", m.train.dataset, base, "synth/dataset.csv", out);
        r.path("checkpoint", m.train.checkpoint, base, "model.stvt", out);
        TrainConfig& c = m.train.config;
        r.field("lambda", c.lambda_balance);
        r.field("learning_rate", c.learning_rate);
        r.field("beta1", c.beta1);
        r.field("beta2", c.beta2);
        r.field("epsilon", c.epsilon);
        r.field("epochs", c.epochs);
        r.field("batch_size", c.batch_size);
        r.field("frozen_prefixes", c.frozen_prefixes);
        r.finish();
        c.seed = stage_seed(m.seed, Stage::Train);
        c.threads = std::max(1u, m.threads);
        for (auto& e : c.validate()) errors.push_back(std::move(e));
    }
    {
        detail::SectionReader r(root, "eval", errors);
        r.path("dataset", m.eval.dataset, base, "synth/dataset.csv", out);
        r.path("checkpoint", m.eval.checkpoint, base, "model.stvt", out);
        r.field("split", m.eval.split);
        r.finish();
        if (m.eval.split != "train" && m.eval.split != "test" && m.eval.split != "all")
            errors.emplace_back("eval.split must be one of train, test, all");
    }
    {
        detail::SectionReader r(root, "bench", errors);
        r.path("checkpoint", m.bench.checkpoint, base, "", out);
        r.field("repeats", m.bench.repeats);
        r.field("chunk_frames", m.bench.chunk_frames);
        r.field("sensor_size", m.bench.sensor_size);
        r.finish();
        if (m.bench.repeats < 1) errors.emplace_back("bench.repeats must be >= 1");
        if (m.bench.chunk_frames < 1) errors.emplace_back("bench.chunk_frames must be >= 1");
        if (m.bench.sensor_size < 8) errors.emplace_back("bench.sensor_size must be >= 8");
    }
    if (!errors.empty()) throw ValidationError(std::move(errors));
    return m;
}

inline PipelineManifest load_manifest(const fs::path& path, const CliOverrides& overrides = {}) {
    if (!fs::exists(path)) throw MissingInputError(path);
    std::ifstream in(path);
    json root;
    try {
        root = json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
        throw ValidationError({"manifest " + path.string() + " is not valid JSON: " + e.what()});
    }
    return parse_manifest(root, path.parent_path().empty() ? fs::path(".") : path.parent_path(), overrides);
}

// ---- CSV manifests ------------------------------------------------------------------------

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

/// Comma-separated rows with trimmed cells; blank lines, '#' comments and a header whose
/// first cell is `header0` are skipped.
struct TableRow {
    std::size_t line = 0;
    std::vector<std::string> cells;
};

inline std::vector<TableRow> read_table(const fs::path& path, const std::string& header0, std::size_t columns) {
    if (!fs::exists(path)) throw MissingInputError(path);
    std::ifstream in(path);
    std::vector<TableRow> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        std::vector<std::string> cells;
        for (auto c : split_commas(t)) cells.push_back(trim(c));
        if (cells.front() == header0) continue;
        if (cells.size() != columns)
            throw ParseError(path.string() + ": expected " + std::to_string(columns) + " columns", line_no);
        rows.push_back({line_no, std::move(cells)});
    }
    return rows;
}

inline fs::path resolve_from(const fs::path& table, const std::string& cell) {
    const fs::path p(cell);
    return p.is_absolute() ? p : (table.parent_path() / p).lexically_normal();
}

inline std::string path_cell(const fs::path& target, const fs::path& table_dir) {
    return fs::path(target).lexically_relative(table_dir).generic_string();
}

}  // namespace detail

struct DatasetRow {
    std::string video_id;
    fs::path frames;  // EVFR file, a directory of EVFR files, or an event file
    fs::path alpha;
    int class_label = 0;
    std::string split;
};

/// Rows of `video_id, frames_or_events, alpha_file, class_label, split`; paths are relative
/// to the manifest file.
inline std::vector<DatasetRow> load_dataset_manifest(const fs::path& path) {
    std::vector<DatasetRow> out;
    for (const auto& [line, c] : detail::read_table(path, "video_id", 5)) {
        DatasetRow r;
        r.video_id = c[0];
        r.frames = detail::resolve_from(path, c[1]);
        r.alpha = detail::resolve_from(path, c[2]);
        int label = -1;
        const auto [ptr, ec] = std::from_chars(c[3].data(), c[3].data() + c[3].size(), label);
        if (ec != std::errc() || ptr != c[3].data() + c[3].size() || label < 0)
            throw ParseError(path.string() + ": bad class label '" + c[3] + "'", line);
        r.class_label = label;
        r.split = c[4];
        if (r.split != "train" && r.split != "test") throw ParseError(path.string() + ": split must be train or test", line);
        out.push_back(std::move(r));
    }
    return out;
}

inline void save_dataset_manifest(const std::vector<DatasetRow>& rows, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path.string());
    const fs::path dir = path.parent_path();
    out << "video_id,frames,alpha,class_label,split\n";
    for (const auto& r : rows)
        out << r.video_id << ',' << detail::path_cell(r.frames, dir) << ',' << detail::path_cell(r.alpha, dir) << ','
            << r.class_label << ',' << r.split << '\n';
}

/// Two-column `video_id, file` manifests (event files, landmark files).
inline std::vector<std::pair<std::string, fs::path>> load_file_manifest(const fs::path& path) {
    std::vector<std::pair<std::string, fs::path>> out;
    for (const auto& [line, c] : detail::read_table(path, "video_id", 2)) out.emplace_back(c[0], detail::resolve_from(path, c[1]));
    return out;
}

inline void save_file_manifest(const std::vector<std::pair<std::string, fs::path>>& rows, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path.string());
    out << "video_id,file\n";
    for (const auto& [id, p] : rows) out << id << ',' << detail::path_cell(p, path.parent_path()) << '\n';
}

inline bool is_event_file(const fs::path& p) {
    const auto ext = p.extension().string();
    return ext == ".evbin" || ext == ".csv";
}

/// Frames for one video at the model's resolution. The alpha file fixes the clip length:
/// missing trailing windows are event-free frames and surplus frames are dropped.
inline VideoSample load_video_sample(const DatasetRow& row, const ModelConfig& config, std::uint64_t delta_t = kDefaultDeltaT) {
    VideoSample s;
    s.id = row.video_id;
    s.class_label = row.class_label;
    s.alpha_targets = load_alpha_sequence(row.alpha);
    if (s.alpha_targets.cols() != config.alpha_dim)
        throw ShapeError(row.alpha.string() + " has " + std::to_string(s.alpha_targets.cols()) + " coefficients per frame, model expects " +
                         std::to_string(config.alpha_dim));
    if (row.class_label >= config.num_classes)
        throw InvalidArgument("class label " + std::to_string(row.class_label) + " of " + row.video_id + " exceeds model.num_classes");

    std::vector<Image> frames;
    std::uint32_t width = 0, height = 0;
    if (fs::is_directory(row.frames)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(row.frames))
            if (e.path().extension() == ".evfr") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
            for (auto& img : load_frames(f)) frames.push_back(std::move(img));
    } else if (is_event_file(row.frames)) {
        const EventStream stream = decode_events(row.frames);
        width = stream.width;
        height = stream.height;
        for (const auto& f : aggregate_periodic(stream, delta_t)) frames.push_back(render_frame(f));
    } else {
        frames = load_frames(row.frames);
    }
    if (!frames.empty()) {
        width = static_cast<std::uint32_t>(frames.front().width);
        height = static_cast<std::uint32_t>(frames.front().height);
    }
    const auto n = static_cast<std::size_t>(s.alpha_targets.rows());
    frames.resize(std::min(frames.size(), n));
    const Image empty_frame = width > 0 ? Image(static_cast<int>(height), static_cast<int>(width), 1, 0.5f)
                                        : Image(config.image_size, config.image_size, config.in_channels, 0.5f);
    while (frames.size() < n) frames.push_back(empty_frame);
    for (auto& f : frames) {
        if (f.channels != config.in_channels)
            throw ShapeError(row.video_id + ": frames have " + std::to_string(f.channels) + " channels, model expects " +
                             std::to_string(config.in_channels));
        if (f.height != config.image_size || f.width != config.image_size) f = resize_area(f, config.image_size, config.image_size);
    }
    s.frames = std::move(frames);
    s.valid_len = n;
    return s;
}

inline std::vector<VideoSample> load_split(const fs::path& dataset, const std::string& split, const ModelConfig& config,
                                           std::uint64_t delta_t = kDefaultDeltaT) {
    const auto rows = load_dataset_manifest(dataset);
    for (const auto& r : rows) {
        if (split != "all" && r.split != split) continue;
        if (!fs::exists(r.frames)) throw MissingInputError(r.frames);
        if (!fs::exists(r.alpha)) throw MissingInputError(r.alpha);
    }
    std::vector<VideoSample> out;
    for (const auto& r : rows)
        if (split == "all" || r.split == split) out.push_back(load_video_sample(r, config, delta_t));
    return out;
}

// ---- reports --------------------------------------------------------------------------------

struct RunReport {
    std::string stage;
    std::optional<Metrics> metrics;
    /// Wall-clock milliseconds; kept out of the main report files, which stay reproducible.
    std::vector<std::pair<std::string, double>> timing_ms;
    json config;
    json versions;
    std::vector<std::pair<std::string, std::string>> summary;

    void note(const std::string& key, const std::string& value) { summary.emplace_back(key, value); }
    void note(const std::string& key, double value);
    void note(const std::string& key, std::size_t value) { summary.emplace_back(key, std::to_string(value)); }
};

/// Shortest decimal that parses back to the same double; always has a '.' or exponent.
inline std::string format_exact(double v) {
    if (!std::isfinite(v)) return v != v ? "nan" : (v > 0 ? "inf" : "-inf");
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    std::string s(buf, ptr);
    if (s.find_first_of(".e") == std::string::npos) s += ".0";
    return s;
}

inline std::string format_fixed(double v, int decimals) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, decimals);
    return std::string(buf, ptr);
}

inline void RunReport::note(const std::string& key, double value) { summary.emplace_back(key, format_exact(value)); }

inline json version_info() {
    return {{"evmorph", kVersion},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
            {"compiler", __VERSION__}};
}

enum class ReportFormat { TextTable, Csv };

/// Column headers: Acc, Top3, Top5, then one per class id.
inline std::vector<std::string> metric_columns(const Metrics& m) {
    std::vector<std::string> cols = {"Acc", "Top3", "Top5"};
    for (std::size_t c = 0; c < m.per_class.size(); ++c) cols.push_back(std::to_string(c));
    return cols;
}

/// Percentages; a class without samples is "-".
inline std::vector<std::string> metric_cells(const Metrics& m, bool exact) {
    auto fmt = [&](double fraction) { return exact ? format_exact(100.0 * fraction) : format_fixed(100.0 * fraction, 1); };
    std::vector<std::string> cells = {fmt(m.top1), fmt(m.top3), fmt(m.top5)};
    for (const auto& pc : m.per_class) cells.push_back(pc ? fmt(*pc) : "-");
    return cells;
}

inline std::string format_report(const RunReport& report, ReportFormat format) {
    std::ostringstream out;
    if (format == ReportFormat::Csv) {
        if (report.metrics) {
            const auto cols = metric_columns(*report.metrics);
            const auto cells = metric_cells(*report.metrics, true);
            for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
            out << '\n';
            for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
            out << '\n';
        } else {
            out << "key,value\n";
            for (const auto& [k, v] : report.summary) out << k << ',' << v << '\n';
        }
        return out.str();
    }
    out << "stage: " << report.stage << '\n';
    if (report.metrics) {
        const auto cols = metric_columns(*report.metrics);
        const auto cells = metric_cells(*report.metrics, false);
        std::string head, row, rule;
        for (std::size_t i = 0; i < cols.size(); ++i) {
            const std::size_t w = std::max<std::size_t>({cols[i].size(), cells[i].size(), 5});
            head += "| " + std::string(w - cols[i].size(), ' ') + cols[i] + ' ';
            row += "| " + std::string(w - cells[i].size(), ' ') + cells[i] + ' ';
            rule += "+" + std::string(w + 2, '-');
        }
        out << rule << "+\n" << head << "|\n" << rule << "+\n" << row << "|\n" << rule << "+\n";
        out << "samples: " << report.metrics->samples << '\n';
    }
    for (const auto& [k, v] : report.summary) out << k << ": " << v << '\n';
    return out.str();
}

inline void emit_report(const RunReport& report, ReportFormat format, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write report " + path.string());
    out << format_report(report, format);
}

/// Inverse of the CSV metrics table. Confusion counts are not part of the table.
inline Metrics parse_metrics_csv(const std::string& text) {
    std::istringstream in(text);
    std::string header, values;
    if (!std::getline(in, header) || !std::getline(in, values)) throw ParseError("metrics CSV needs a header and a value row", 1);
    const auto cols = detail::split_commas(header);
    const auto cells = detail::split_commas(values);
    if (cols.size() != cells.size() || cols.size() < 3) throw ParseError("metrics CSV header and row widths differ", 2);
    if (cols[0] != "Acc" || cols[1] != "Top3" || cols[2] != "Top5") throw ParseError("metrics CSV must start with Acc,Top3,Top5", 1);
    auto num = [](std::string_view s) {
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size()) throw ParseError("bad metrics value '" + std::string(s) + "'", 2);
        return v / 100.0;
    };
    Metrics m;
    m.top1 = num(cells[0]);
    m.top3 = num(cells[1]);
    m.top5 = num(cells[2]);
    for (std::size_t i = 3; i < cells.size(); ++i) {
        if (cells[i] == "-") {
            m.per_class.emplace_back(std::nullopt);
        } else {
            m.per_class.emplace_back(num(cells[i]));
        }
    }
    return m;
}

/// Report files for a stage: <stage>.txt, <stage>.csv, <stage>.json and <stage>.timing.json.
inline void write_stage_reports(const RunReport& report, const fs::path& out_dir) {
    const fs::path dir = out_dir / "reports";
    fs::create_directories(dir);
    emit_report(report, ReportFormat::TextTable, dir / (report.stage + ".txt"));
    emit_report(report, ReportFormat::Csv, dir / (report.stage + ".csv"));
    json j{{"stage", report.stage}, {"config", report.config}, {"versions", report.versions}};
    json summary = json::object();
    for (const auto& [k, v] : report.summary) summary[k] = v;
    j["summary"] = summary;
    if (report.metrics) {
        j["metrics"] = {{"top1", report.metrics->top1}, {"top3", report.metrics->top3}, {"top5", report.metrics->top5},
                        {"samples", report.metrics->samples}};
        json conf = json::array();
        for (Eigen::Index r = 0; r < report.metrics->confusion.rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < report.metrics->confusion.cols(); ++c) row.push_back(report.metrics->confusion(r, c));
            conf.push_back(row);
        }
        j["metrics"]["confusion"] = conf;
    }
    std::ofstream(dir / (report.stage + ".json"), std::ios::binary) << j.dump(2) << '\n';
    json t = json::object();
    for (const auto& [k, v] : report.timing_ms) t[k] = v;
    std::ofstream(dir / (report.stage + ".timing.json"), std::ios::binary) << t.dump(2) << '\n';
}

// ---- stages -------------------------------------------------------------------------------------

namespace detail {

class Stopwatch {
public:
    double ms() const { return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline void require(const ConfigPath& p, const std::string& what) {
    if (p.resolved.empty()) throw ValidationError({what + " is not configured"});
    if (!fs::exists(p.resolved)) throw MissingInputError(p.resolved);
}

inline json to_json(const FitConfig& c) {
    return {{"lambda", c.lambda_reg},
            {"normalize_scale", c.normalize_scale},
            {"camera_refinements", c.camera_refinements},
            {"refinement_tolerance", c.refinement_tolerance}};
}

inline json to_json(const TrainConfig& c) {
    return {{"lambda", c.lambda_balance}, {"learning_rate", c.learning_rate}, {"beta1", c.beta1},
            {"beta2", c.beta2},           {"epsilon", c.epsilon},             {"epochs", c.epochs},
            {"batch_size", c.batch_size}, {"seed", c.seed},                   {"frozen_prefixes", c.frozen_prefixes}};
}

inline json to_json(const SynthSpec& s) {
    return {{"n_classes", s.n_classes},         {"n_videos_per_class", s.n_videos_per_class},
            {"seq_len", s.seq_len},             {"K", s.K},
            {"id_components", s.id_components}, {"mesh_size", s.mesh_size},
            {"noise_sigma", s.noise_sigma},     {"sensor_size", s.sensor_size},
            {"image_size", s.image_size},       {"events_per_frame", s.events_per_frame},
            {"test_fraction", s.test_fraction}, {"lambda", s.lambda_reg},
            {"seed", s.seed}};
}

inline RunReport build_3dmm(const PipelineManifest& m) {
    RunReport r;
    const auto& b = m.build;
    if (b.neutral_meshes.size() < 2) throw ValidationError({"build_3dmm.neutral_meshes needs at least two meshes"});
    for (const auto& p : b.neutral_meshes) require(p, "build_3dmm.neutral_meshes");
    for (const auto& e : b.expressions) {
        require(e.expressive, "build_3dmm.expressions.expressive");
        require(e.neutral, "build_3dmm.expressions.neutral");
    }
    std::vector<Mesh> neutral;
    for (const auto& p : b.neutral_meshes) neutral.push_back(load_mesh(p.resolved));
    const IdentityPca pca = build_identity_pca(neutral, b.id_components);
    fs::create_directories(m.out_dir);
    save_model(pca.model, m.out_dir / "id_model.m3dm");
    r.note("neutral_meshes", neutral.size());
    r.note("id_components", static_cast<std::size_t>(pca.model.component_count()));
    r.note("id_variance_retained", pca.variances.sum());

    json paths = json::array();
    for (const auto& p : b.neutral_meshes) paths.push_back(p.raw);
    r.config = {{"neutral_meshes", paths}, {"id_components", b.id_components}};
    if (!b.expressions.empty()) {
        std::vector<ExpressionPair> pairs;
        for (const auto& e : b.expressions) pairs.push_back({load_mesh(e.expressive.resolved), load_mesh(e.neutral.resolved), e.au});
        DictionaryOptions opt = b.dictionary;
        opt.seed = stage_seed(m.seed, Stage::Build3dmm);
        const DictionaryResult dict = learn_au_dictionary(compute_au_offsets(pairs), pca.model.mean, opt);
        save_model(dict.model, m.out_dir / "au_model.m3dm");
        r.note("expression_pairs", pairs.size());
        r.note("dictionary_initial_residual", dict.residual.front());
        r.note("dictionary_final_residual", dict.residual.back());
        r.config["dictionary"] = {{"num_atoms", opt.num_atoms}, {"sparsity", opt.sparsity}, {"iterations", opt.iterations}, {"seed", opt.seed}};
    }
    return r;
}

inline RunReport fit(const PipelineManifest& m) {
    RunReport r;
    const auto& f = m.fit;
    require(f.id_model, "fit.id_model");
    require(f.au_model, "fit.au_model");
    require(f.landmark_ids, "fit.landmark_ids");
    require(f.landmarks_manifest, "fit.landmarks_manifest");
    const auto videos = load_file_manifest(f.landmarks_manifest.resolved);
    for (const auto& [id, p] : videos)
        if (!fs::exists(p)) throw MissingInputError(p);
    const MorphableModel id_model = load_model(f.id_model.resolved);
    const MorphableModel au_model = load_model(f.au_model.resolved);
    const auto ids = load_landmark_ids(f.landmark_ids.resolved);
    const fs::path dir = m.out_dir / "alpha";
    fs::create_directories(dir);
    double residual_sum = 0.0;
    std::size_t frames = 0;
    for (const auto& [id, p] : videos) {
        const auto seq = load_landmark_sequence(p);
        if (seq.empty()) throw InvalidArgument(p.string() + " holds no frames");
        const IdentityFit idf = fit_identity(seq.front(), id_model, ids, f.config);
        const auto fits = fit_au_sequence_detailed(seq, idf.shape, au_model, ids, f.config, m.threads);
        AlphaSequence alphas(static_cast<Eigen::Index>(fits.size()), au_model.component_count());
        for (std::size_t i = 0; i < fits.size(); ++i) {
            alphas.row(static_cast<Eigen::Index>(i)) = fits[i].alpha.transpose();
            residual_sum += fits[i].residual;
        }
        frames += fits.size();
        save_alpha_sequence(alphas, dir / (id + ".csv"));
        save_alpha_sequence(idf.alpha.transpose(), dir / (id + ".identity.csv"));
    }
    r.note("videos", videos.size());
    r.note("frames", frames);
    r.note("mean_residual_px2", frames ? residual_sum / static_cast<double>(frames) : 0.0);
    r.config = to_json(f.config);
    r.config["id_model"] = f.id_model.raw;
    r.config["au_model"] = f.au_model.raw;
    r.config["landmark_ids"] = f.landmark_ids.raw;
    r.config["landmarks_manifest"] = f.landmarks_manifest.raw;
    return r;
}

inline RunReport aggregate(const PipelineManifest& m) {
    RunReport r;
    require(m.aggregate.events_manifest, "aggregate.events_manifest");
    const auto videos = load_file_manifest(m.aggregate.events_manifest.resolved);
    for (const auto& [id, p] : videos)
        if (!fs::exists(p)) throw MissingInputError(p);
    const fs::path dir = m.out_dir / "frames";
    fs::create_directories(dir);
    std::size_t total_frames = 0, total_events = 0;
    for (const auto& [id, p] : videos) {
        std::vector<Image> frames;
        if (fs::file_size(p) > 0) {
            const EventStream stream = decode_events(p);
            total_events += stream.events.size();
            for (const auto& f : aggregate_periodic(stream, m.aggregate.delta_t, m.threads)) frames.push_back(render_frame(f));
        }
        total_frames += frames.size();
        save_frames(frames, m.aggregate.delta_t, dir / (id + ".evfr"));
        r.note("frames." + id, frames.size());
    }
    r.note("videos", videos.size());
    r.note("events", total_events);
    r.note("frames", total_frames);
    r.config = {{"events_manifest", m.aggregate.events_manifest.raw}, {"delta_t", m.aggregate.delta_t}};
    return r;
}

/// Writes models, per-video events/landmarks/alphas and the CSV manifests the other stages read.
inline RunReport synth(const PipelineManifest& m) {
    RunReport r;
    const SyntheticDataset ds = make_dataset(m.synth, m.threads);
    const fs::path root = m.out_dir;
    const fs::path sdir = root / "synth";
    for (const char* sub : {"events", "landmarks", "alpha", "alpha_true"}) fs::create_directories(sdir / sub);
    save_model(ds.models.identity, root / "id_model.m3dm");
    save_model(ds.models.action_units, root / "au_model.m3dm");
    save_landmark_ids(ds.models.landmark_ids, root / "landmark_ids.txt");

    std::vector<std::pair<std::string, fs::path>> events, landmarks;
    std::vector<DatasetRow> rows;
    std::size_t n_events = 0, n_test = 0;
    for (std::size_t v = 0; v < ds.samples.size(); ++v) {
        const auto& s = ds.samples[v];
        const auto& gt = ds.truth[v];
        const fs::path ev = sdir / "events" / (s.id + ".evbin");
        const fs::path lm = sdir / "landmarks" / (s.id + ".csv");
        const fs::path al = sdir / "alpha" / (s.id + ".csv");
        encode_events(gt.events, ev, EventFormat::Evbin);
        save_landmark_sequence(gt.landmarks, lm);
        save_alpha_sequence(gt.alpha_fitted, al);
        save_alpha_sequence(gt.alpha_au, sdir / "alpha_true" / (s.id + ".csv"));
        events.emplace_back(s.id, ev);
        landmarks.emplace_back(s.id, lm);
        rows.push_back({s.id, root / "frames" / (s.id + ".evfr"), al, s.class_label, ds.is_test[v] ? "test" : "train"});
        n_events += gt.events.events.size();
        n_test += ds.is_test[v] ? 1 : 0;
    }
    save_file_manifest(events, sdir / "events.csv");
    save_file_manifest(landmarks, sdir / "landmarks.csv");
    save_dataset_manifest(rows, sdir / "dataset.csv");
    r.note("videos", ds.samples.size());
    r.note("test_videos", n_test);
    r.note("events", n_events);
    r.config = to_json(m.synth);
    return r;
}

inline RunReport train(const PipelineManifest& m) {
    RunReport r;
    require(m.train.dataset, "train.dataset");
    const auto data = load_split(m.train.dataset.resolved, "train", m.model, m.aggregate.delta_t);
    if (data.empty()) throw InvalidArgument("the dataset has no train rows");
    const TrainResult result = evmorph::train(data, m.model, m.train.config);
    if (m.train.checkpoint.resolved.has_parent_path()) fs::create_directories(m.train.checkpoint.resolved.parent_path());
    save_checkpoint(result.model, m.train.checkpoint.resolved);

    std::ofstream hist(m.out_dir / "reports" / "train_history.csv", std::ios::binary);
    hist << "epoch,loss,classification,regression,train_top1\n";
    for (std::size_t e = 0; e < result.history.size(); ++e) {
        const auto& h = result.history[e];
        hist << e + 1 << ',' << format_exact(h.loss) << ',' << format_exact(h.classification_loss) << ','
             << format_exact(h.regression_loss) << ',' << format_exact(h.train_top1) << '\n';
    }
    r.metrics = evaluate(result.model, data, m.threads);
    r.note("train_videos", data.size());
    r.note("epochs", static_cast<std::size_t>(m.train.config.epochs));
    if (!result.history.empty()) {
        r.note("final_loss", result.history.back().loss);
        r.note("final_regression_loss", result.history.back().regression_loss);
    }
    r.config = {{"train", to_json(m.train.config)},
                {"model", json(m.model)},
                {"dataset", m.train.dataset.raw},
                {"checkpoint", m.train.checkpoint.raw}};
    return r;
}

inline RunReport eval(const PipelineManifest& m) {
    RunReport r;
    require(m.eval.checkpoint, "eval.checkpoint");
    require(m.eval.dataset, "eval.dataset");
    const Model model = load_checkpoint(m.eval.checkpoint.resolved);
    const auto data = load_split(m.eval.dataset.resolved, m.eval.split, model.config, m.aggregate.delta_t);
    if (data.empty()) throw InvalidArgument("the dataset has no rows in split '" + m.eval.split + "'");
    r.metrics = evaluate(model, data, m.threads);
    r.note("videos", data.size());
    r.note("top_k_ordered", std::string(r.metrics->top1 <= r.metrics->top3 && r.metrics->top3 <= r.metrics->top5 ? "yes" : "no"));
    r.config = {{"dataset", m.eval.dataset.raw}, {"checkpoint", m.eval.checkpoint.raw}, {"split", m.eval.split}, {"model", json(model.config)}};
    return r;
}

/// Latency of aggregate + render + resample + forward on one synthetic chunk of
/// `chunk_frames` 33 ms windows (30 frames ~ 1 s). Recorded only.
inline RunReport bench(const PipelineManifest& m) {
    RunReport r;
    Model model;
    if (!m.bench.checkpoint.raw.empty()) {
        require(m.bench.checkpoint, "bench.checkpoint");
        model = load_checkpoint(m.bench.checkpoint.resolved);
    } else {
        model = init_model(m.model, stage_seed(m.seed, Stage::Bench));
    }
    const std::uint64_t seed = stage_seed(m.seed, Stage::Bench);
    const int frames_n = m.bench.chunk_frames;
    const SyntheticModels sm = make_synthetic_models(100, 4, 4, seed);
    const AlphaSequence traj = gen_alpha_trajectory(0, frames_n, 4, seed);
    const auto lms = render_synthetic_landmarks(traj, sm.action_units, sm.landmark_ids, random_camera(m.bench.sensor_size, seed), 0.0, 0);
    const auto sensor = static_cast<std::uint32_t>(m.bench.sensor_size);
    const EventStream stream = gen_synthetic_events(lms, sensor, sensor, 4, seed).stream;
    if (model.config.in_channels != 1) throw InvalidArgument("bench renders single-channel event frames");

    auto run_chunk = [&] {
        std::vector<Image> frames;
        for (const auto& f : aggregate_periodic(stream, kDefaultDeltaT, m.threads))
            frames.push_back(resize_area(render_frame(f), model.config.image_size, model.config.image_size));
        frames.resize(static_cast<std::size_t>(frames_n),
                      Image(model.config.image_size, model.config.image_size, 1, 0.5f));
        const auto L = static_cast<std::size_t>(model.config.seq_len);
        double sink = 0.0;
        for (std::size_t start = 0; start < frames.size(); start += L) {
            const std::size_t n = std::min(L, frames.size() - start);
            sink += forward(model, std::span<const Image>(frames).subspan(start, n)).class_logits.sum();
        }
        return sink;
    };
    (void)run_chunk();  // warm-up
    std::vector<double> ms;
    for (int i = 0; i < m.bench.repeats; ++i) {
        Stopwatch sw;
        (void)run_chunk();
        ms.push_back(sw.ms());
    }
    const double mean = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
    r.note("chunk_frames", static_cast<std::size_t>(frames_n));
    r.note("events_per_chunk", stream.events.size());
    r.note("repeats", static_cast<std::size_t>(m.bench.repeats));
    r.note("latency_ms_mean", format_fixed(mean, 3));
    r.note("latency_ms_min", format_fixed(*std::min_element(ms.begin(), ms.end()), 3));
    r.note("latency_ms_max", format_fixed(*std::max_element(ms.begin(), ms.end()), 3));
    r.note("reference_ms", std::string("18.8 (different, unspecified hardware)"));
    for (std::size_t i = 0; i < ms.size(); ++i) r.timing_ms.emplace_back("chunk" + std::to_string(i), ms[i]);
    r.config = {{"repeats", m.bench.repeats}, {"chunk_frames", frames_n}, {"sensor_size", m.bench.sensor_size},
                {"checkpoint", m.bench.checkpoint.raw}, {"model", json(model.config)}};
    return r;
}

}  // namespace detail

/// Runs one stage and writes its artifacts plus report files under the output directory.
inline RunReport run_stage(const PipelineManifest& manifest, Stage stage) {
    fs::create_directories(manifest.out_dir / "reports");
    detail::Stopwatch sw;
    RunReport report;
    switch (stage) {
        case Stage::Build3dmm: report = detail::build_3dmm(manifest); break;
        case Stage::Fit: report = detail::fit(manifest); break;
        case Stage::Aggregate: report = detail::aggregate(manifest); break;
        case Stage::Synth: report = detail::synth(manifest); break;
        case Stage::Train: report = detail::train(manifest); break;
        case Stage::Eval: report = detail::eval(manifest); break;
        case Stage::Bench: report = detail::bench(manifest); break;
    }
    report.stage = to_string(stage);
    report.config["seed"] = manifest.seed;
    report.config["threads"] = manifest.threads;
    report.versions = version_info();
    report.timing_ms.emplace_back("total", sw.ms());
    write_stage_reports(report, manifest.out_dir);
    return report;
}

}  // namespace evmorph
