#include <gtest/gtest.h>

#include <fstream>
#include <map>

#include "evmorph.hpp"

using namespace evmorph;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("evmorph_pipeline_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

json small_manifest() {
    return json::parse(R"({
      "seed": 5,
      "synth": {"n_classes": 2, "n_videos_per_class": 3, "seq_len": 4, "K": 4, "id_components": 3,
                "sensor_size": 32, "image_size": 16},
      "model": {"image_size": 16, "patch_size": 8, "embed_dim": 8, "spatial_depth": 1, "temporal_depth": 1,
                "heads": 2, "num_classes": 2, "alpha_dim": 4, "seq_len": 4, "regression_hidden": 8},
      "train": {"epochs": 2, "batch_size": 2, "learning_rate": 0.01},
      "eval": {"split": "all"},
      "bench": {"repeats": 1, "chunk_frames": 4}
    })");
}

/// Every file under `dir` except wall-clock timing, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), dir).generic_string();
        if (rel.ends_with(".timing.json")) continue;
        std::ifstream in(e.path(), std::ios::binary);
        out[rel] = std::string(std::istreambuf_iterator<char>(in), {});
    }
    return out;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

Metrics sample_metrics() {
    Metrics m;
    m.top1 = 0.625;
    m.top3 = 0.8;
    m.top5 = 1.0;
    m.per_class = {1.0 / 3.0, std::nullopt, 0.1};
    m.samples = 9;
    return m;
}

}  // namespace

TEST(Manifest, EmptyObjectGivesDefaultsUnderOut) {
    const auto m = parse_manifest(json::object(), "/data/run");
    EXPECT_EQ(m.out_dir, fs::path("/data/run/evmorph_out"));
    EXPECT_EQ(m.threads, 1u);
    EXPECT_EQ(m.train.checkpoint.resolved, fs::path("/data/run/evmorph_out/model.stvt"));
    EXPECT_EQ(m.aggregate.events_manifest.resolved, fs::path("/data/run/evmorph_out/synth/events.csv"));
    EXPECT_EQ(m.model, ModelConfig{});
    EXPECT_EQ(m.eval.split, "test");
}

TEST(Manifest, RelativePathsResolveAgainstManifestDirectory) {
    json j = json::object();
    j["train"] = {{"dataset", "data/set.csv"}, {"checkpoint", "/abs/model.stvt"}};
    const auto m = parse_manifest(j, "/proj");
    EXPECT_EQ(m.train.dataset.resolved, fs::path("/proj/data/set.csv"));
    EXPECT_EQ(m.train.dataset.raw, "data/set.csv");
    EXPECT_EQ(m.train.checkpoint.resolved, fs::path("/abs/model.stvt"));
}

TEST(Manifest, ValidationReportsEveryProblem) {
    json j = small_manifest();
    j["threads"] = 0;
    j["bogus"] = 1;
    j["model"]["heads"] = 3;
    j["model"]["patch_size"] = "eight";
    j["train"]["epochs"] = -1;
    j["train"]["learing_rate"] = 0.1;
    j["synth"]["K"] = 1;
    j["eval"]["split"] = "dev";
    j["aggregate"] = {{"delta_t", 0}};
    try {
        parse_manifest(j, ".");
        FAIL() << "expected a validation error";
    } catch (const ValidationError& e) {
        const auto& p = e.problems();
        auto has = [&](const std::string& needle) {
            return std::any_of(p.begin(), p.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
        };
        EXPECT_TRUE(has("threads must be >= 1"));
        EXPECT_TRUE(has("bogus: unknown key"));
        EXPECT_TRUE(has("model.embed_dim must be divisible by model.heads"));
        EXPECT_TRUE(has("model.patch_size: must be an integer"));
        EXPECT_TRUE(has("train.epochs must be >= 0"));
        EXPECT_TRUE(has("train.learing_rate: unknown key"));
        EXPECT_TRUE(has("synth.n_classes must not exceed synth.K"));
        EXPECT_TRUE(has("eval.split"));
        EXPECT_TRUE(has("aggregate.delta_t must be > 0"));
        EXPECT_GE(p.size(), 9u);
    }
}

TEST(Manifest, CommandLineOverridesFileValues) {
    const fs::path dir = fresh_dir("overrides");
    json j = small_manifest();
    j["threads"] = 2;
    j["out"] = "from_file";
    std::ofstream(dir / "m.json") << "// comments are allowed\n" << j.dump(2);
    const auto plain = load_manifest(dir / "m.json");
    EXPECT_EQ(plain.threads, 2u);
    EXPECT_EQ(plain.seed, 5u);
    EXPECT_EQ(plain.out_dir, dir / "from_file");

    CliOverrides o;
    o.threads = 1;
    o.seed = 9;
    o.out = dir / "cli_out";
    const auto m = load_manifest(dir / "m.json", o);
    EXPECT_EQ(m.threads, 1u);
    EXPECT_EQ(m.seed, 9u);
    EXPECT_EQ(m.out_dir, dir / "cli_out");
    EXPECT_EQ(m.train.checkpoint.resolved, dir / "cli_out" / "model.stvt");
    // Stage seeds follow the effective top-level seed.
    EXPECT_EQ(m.synth.seed, stage_seed(9, Stage::Synth));
    EXPECT_EQ(m.train.config.seed, stage_seed(9, Stage::Train));
    EXPECT_NE(plain.train.config.seed, m.train.config.seed);

    EXPECT_THROW(load_manifest(dir / "absent.json"), MissingInputError);
    std::ofstream(dir / "bad.json") << "{ not json";
    EXPECT_THROW(load_manifest(dir / "bad.json"), ValidationError);
}

TEST(Stages, NamesRoundTripAndSeedsDiffer) {
    std::set<std::uint64_t> seeds;
    for (const auto& [name, stage] : stage_names()) {
        EXPECT_EQ(parse_stage(name), stage);
        EXPECT_EQ(to_string(stage), name);
        seeds.insert(stage_seed(1, stage));
    }
    EXPECT_EQ(seeds.size(), stage_names().size());
    EXPECT_THROW(parse_stage("deploy"), InvalidArgument);
}

TEST(Report, PerfectMetricsRenderAsHundred) {
    Metrics m;
    m.top1 = m.top3 = m.top5 = 1.0;
    m.per_class = {1.0, 1.0, 1.0, 1.0};
    m.samples = 4;
    RunReport r;
    r.stage = "eval";
    r.metrics = m;
    const std::string csv = format_report(r, ReportFormat::Csv);
    EXPECT_EQ(csv, "Acc,Top3,Top5,0,1,2,3\n100.0,100.0,100.0,100.0,100.0,100.0,100.0\n");
    const std::string text = format_report(r, ReportFormat::TextTable);
    EXPECT_NE(text.find("|   Acc |  Top3 |  Top5 |"), std::string::npos);
    EXPECT_NE(text.find("| 100.0 | 100.0 | 100.0 | 100.0 |"), std::string::npos);
}

TEST(Report, AbsentClassRendersAsDash) {
    RunReport r;
    r.stage = "eval";
    r.metrics = sample_metrics();
    const auto cells = metric_cells(*r.metrics, false);
    EXPECT_EQ(cells[4], "-");
    EXPECT_EQ(cells[3], "33.3");
    EXPECT_NE(format_report(r, ReportFormat::Csv).find(",-,"), std::string::npos);
}

TEST(Report, CsvRoundTrip) {
    const Metrics m = sample_metrics();
    RunReport r;
    r.metrics = m;
    const Metrics back = parse_metrics_csv(format_report(r, ReportFormat::Csv));
    // Percent scaling is the only loss: one rounding each way.
    EXPECT_NEAR(back.top1, m.top1, 1e-15);
    EXPECT_NEAR(back.top3, m.top3, 1e-15);
    EXPECT_NEAR(back.top5, m.top5, 1e-15);
    ASSERT_EQ(back.per_class.size(), m.per_class.size());
    for (std::size_t c = 0; c < m.per_class.size(); ++c) {
        ASSERT_EQ(back.per_class[c].has_value(), m.per_class[c].has_value());
        if (m.per_class[c]) EXPECT_NEAR(*back.per_class[c], *m.per_class[c], 1e-15);
    }
    EXPECT_THROW(parse_metrics_csv("Acc,Top3\n1,2\n"), ParseError);
    EXPECT_THROW(parse_metrics_csv("Acc,Top3,Top5\n1,x,2\n"), ParseError);
}

TEST(Report, ExactFormattingIsShortestRoundTrip) {
    for (double v : {0.0, 1.0, 0.1, 1.0 / 3.0, 123456.789, 1e-300}) {
        const std::string s = format_exact(v);
        EXPECT_EQ(std::stod(s), v) << s;
        EXPECT_NE(s.find_first_of(".e"), std::string::npos);
    }
    EXPECT_EQ(format_exact(100.0), "100.0");
}

TEST(DatasetManifest, RoundTripWithRelativePaths) {
    const fs::path dir = fresh_dir("dataset");
    fs::create_directories(dir / "sub");
    const std::vector<DatasetRow> rows = {{"a", dir / "frames" / "a.evfr", dir / "sub" / "a.csv", 1, "train"},
                                          {"b", dir / "ev" / "b.evbin", dir / "sub" / "b.csv", 0, "test"}};
    save_dataset_manifest(rows, dir / "sub" / "set.csv");
    EXPECT_NE(read_file(dir / "sub" / "set.csv").find("a,../frames/a.evfr,a.csv,1,train"), std::string::npos);
    const auto back = load_dataset_manifest(dir / "sub" / "set.csv");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].frames, rows[1].frames);
    EXPECT_EQ(back[0].alpha, rows[0].alpha);
    EXPECT_EQ(back[0].class_label, 1);
    std::ofstream(dir / "bad.csv") << "video_id,frames,alpha,class_label,split\nx,f,a,1,dev\n";
    EXPECT_THROW(load_dataset_manifest(dir / "bad.csv"), ParseError);
}

TEST(LoadVideoSample, AlphaLengthFixesClipLength) {
    const fs::path dir = fresh_dir("sample");
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.alpha_dim = 2;
    cfg.num_classes = 3;
    save_alpha_sequence(Matrix::Zero(4, 2), dir / "a4.csv");
    save_alpha_sequence(Matrix::Zero(1, 2), dir / "a1.csv");
    std::vector<Image> two(2, Image(16, 16, 1, 1.0f));
    save_frames(two, kDefaultDeltaT, dir / "f.evfr");
    const auto padded = load_video_sample({"v", dir / "f.evfr", dir / "a4.csv", 2, "train"}, cfg);
    ASSERT_EQ(padded.frames.size(), 4u);
    EXPECT_EQ(padded.frames[0], Image(8, 8, 1, 1.0f));
    EXPECT_EQ(padded.frames[3], Image(8, 8, 1, 0.5f));
    EXPECT_EQ(load_video_sample({"v", dir / "f.evfr", dir / "a1.csv", 2, "train"}, cfg).frames.size(), 1u);
    EXPECT_THROW(load_video_sample({"v", dir / "f.evfr", dir / "a1.csv", 3, "train"}, cfg), InvalidArgument);
    cfg.alpha_dim = 3;
    EXPECT_THROW(load_video_sample({"v", dir / "f.evfr", dir / "a1.csv", 0, "train"}, cfg), ShapeError);
}

TEST(AggregateStage, EmptyEventFileGivesZeroFrames) {
    const fs::path dir = fresh_dir("aggregate_empty");
    std::ofstream(dir / "empty.csv").close();
    save_file_manifest({{"v0", dir / "empty.csv"}}, dir / "events.csv");
    json j = json::object();
    j["aggregate"] = {{"events_manifest", "events.csv"}};
    const auto m = parse_manifest(j, dir);
    const RunReport r = run_stage(m, Stage::Aggregate);
    EXPECT_TRUE(load_frames(m.out_dir / "frames" / "v0.evfr").empty());
    EXPECT_NE(format_report(r, ReportFormat::TextTable).find("frames: 0"), std::string::npos);
    EXPECT_TRUE(fs::exists(m.out_dir / "reports" / "aggregate.csv"));
    EXPECT_TRUE(fs::exists(m.out_dir / "reports" / "aggregate.timing.json"));
}

TEST(Stages, MissingInputsAreReported) {
    const fs::path dir = fresh_dir("missing");
    const auto m = parse_manifest(json::object(), dir);
    EXPECT_THROW(run_stage(m, Stage::Eval), MissingInputError);
    EXPECT_THROW(run_stage(m, Stage::Train), MissingInputError);
    EXPECT_THROW(run_stage(m, Stage::Fit), MissingInputError);
    EXPECT_THROW(run_stage(m, Stage::Build3dmm), ValidationError);
    save_file_manifest({{"v0", dir / "nowhere.evbin"}}, dir / "events.csv");
    json j = json::object();
    j["aggregate"] = {{"events_manifest", "events.csv"}};
    try {
        run_stage(parse_manifest(j, dir), Stage::Aggregate);
        FAIL();
    } catch (const MissingInputError& e) {
        EXPECT_EQ(e.path(), dir / "nowhere.evbin");
    }
}

TEST(Stages, FullRunIsIdempotentAndReproducible) {
    const fs::path a = fresh_dir("run_a"), b = fresh_dir("run_b");
    const Stage order[] = {Stage::Synth, Stage::Aggregate, Stage::Fit, Stage::Train, Stage::Eval};
    auto run_all = [&](const fs::path& dir) {
        const auto m = parse_manifest(small_manifest(), dir);
        for (Stage s : order) run_stage(m, s);
        return m;
    };
    const auto ma = run_all(a);
    const auto first = snapshot(ma.out_dir);
    for (Stage s : order) run_stage(ma, s);
    EXPECT_EQ(snapshot(ma.out_dir), first);

    const auto mb = run_all(b);
    EXPECT_EQ(snapshot(mb.out_dir), first);
    for (const char* f : {"model.stvt", "reports/train.csv", "reports/eval.csv", "reports/train_history.csv", "frames/video0.evfr",
                          "alpha/video0.csv", "synth/dataset.csv"})
        EXPECT_TRUE(first.count(f)) << f;

    const auto eval = parse_metrics_csv(first.at("reports/eval.csv"));
    EXPECT_LE(eval.top1, eval.top3);
    EXPECT_LE(eval.top3, eval.top5);
    EXPECT_EQ(json::parse(first.at("reports/eval.json"))["metrics"]["samples"], 6);

    // A different seed changes the data.
    CliOverrides o;
    o.seed = 6;
    const auto mc = parse_manifest(small_manifest(), fresh_dir("run_c"), o);
    run_stage(mc, Stage::Synth);
    EXPECT_NE(read_file(mc.out_dir / "synth" / "alpha" / "video0.csv"), first.at("synth/alpha/video0.csv"));
}

TEST(Stages, BenchRecordsLatency) {
    const fs::path dir = fresh_dir("bench");
    const auto m = parse_manifest(small_manifest(), dir);
    const RunReport r = run_stage(m, Stage::Bench);
    auto find = [&](const std::string& key) {
        for (const auto& [k, v] : r.summary)
            if (k == key) return v;
        return std::string();
    };
    EXPECT_FALSE(find("latency_ms_mean").empty());
    EXPECT_EQ(find("chunk_frames"), "4");
    EXPECT_FALSE(r.metrics.has_value());
}
