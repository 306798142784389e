#include "unlearncfm/bench.hpp"

#include "CLI11.hpp"

int main(int argc, char** argv) {
    using namespace unlearncfm;

    CLI::App app{"Speaker-identity unlearning benchmark for masked flow-matching generators"};
    app.require_subcommand(1);
    std::string config_path, out_override, method, scenario, budget;
    std::optional<std::uint64_t> seed_override;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value run configuration")->required();
        sub->add_option("--out", out_override, "run directory (overrides the config's out key)");
        sub->add_option("--seed", seed_override, "global seed (overrides the config's seed key)");
    };
    auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus (and k-sweep variants)");
    auto* pre = app.add_subcommand("pretrain", "train the flow-matching model on remain and forget speakers");
    auto* unl = app.add_subcommand("unlearn", "apply an unlearning method to the pretrained checkpoint");
    auto* ev = app.add_subcommand("eval", "evaluate the pretrained or an unlearned checkpoint");
    auto* rec = app.add_subcommand("recover", "fine-tune an unlearned checkpoint on forget speakers");
    auto* rep = app.add_subcommand("report", "consolidate evaluations into markdown and CSV");
    for (auto* s : {gen, pre, unl, ev, rec, rep}) add_common(s);
    unl->add_option("--method", method, "tgu|sgu|ng|kl|ft|exact")->required();
    ev->add_option("--method", method, "unlearned checkpoint to evaluate (default: pretrained)");
    ev->add_option("--scenario", scenario, "standard|robustness|noise|diverse (default: config list)");
    rec->add_option("--method", method, "unlearned checkpoint to attack (default: tgu)");
    rec->add_option("--budget", budget, "full|tiny")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? exit_code::ok : exit_code::config;
    }

    return guarded([&]() -> int {
        RunConfig rc = load_run_config(config_path);
        if (seed_override) {
            rc.seed = *seed_override;
            rc.derive_seeds();
        }
        if (!out_override.empty()) rc.out = out_override;
        const RunDir dir(rc.out);
        if (*gen) return cmd_gen_corpus(rc, dir);
        if (*pre) return cmd_pretrain(rc, dir);
        if (*unl) return cmd_unlearn(rc, dir, method);
        if (*ev) return cmd_eval(rc, dir, method, scenario);
        if (*rec) return cmd_recover(rc, dir, method, budget);
        return cmd_report(rc, dir);
    });
}
