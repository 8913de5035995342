// Exit codes: 0 success, 1 invalid invocation or configuration (including a missing
// input), 2 failure while a stage was running.

#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "evmorph.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Event-based facial action unit pipeline"};
    std::string stage;
    std::string manifest_path;
    unsigned threads = 0;
    std::uint64_t seed = 0;
    std::string out;

    std::vector<std::string> stages;
    for (const auto& [name, s] : evmorph::stage_names()) stages.push_back(name);
    app.add_option("stage", stage, "Stage to run")->required()->check(CLI::IsMember(stages));
    app.add_option("--manifest", manifest_path, "JSON manifest")->required();
    auto* threads_opt = app.add_option("--threads", threads, "Worker threads (1 is fully deterministic)")->check(CLI::PositiveNumber);
    auto* seed_opt = app.add_option("--seed", seed, "Top-level seed");
    auto* out_opt = app.add_option("--out", out, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    evmorph::CliOverrides overrides;
    if (threads_opt->count() > 0) overrides.threads = threads;
    if (seed_opt->count() > 0) overrides.seed = seed;
    if (out_opt->count() > 0) overrides.out = out;

    evmorph::PipelineManifest manifest;
    try {
        manifest = evmorph::load_manifest(manifest_path, overrides);
    } catch (const evmorph::ValidationError& e) {
        for (const auto& p : e.problems()) std::cerr << "error: " << p << '\n';
        return 1;
    }

    try {
        const auto report = evmorph::run_stage(manifest, evmorph::parse_stage(stage));
        std::cout << evmorph::format_report(report, evmorph::ReportFormat::TextTable);
    } catch (const evmorph::ValidationError& e) {
        for (const auto& p : e.problems()) std::cerr << "error: " << p << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
