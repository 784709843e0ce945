// Small end-to-end run on a synthetic cohort: generate, impute, fit the six
// models and print the comparison table.
//
//   quickstart [out_dir]

#include <iostream>

#include "cadpred/cadpred.hpp"

int main(int argc, char** argv)
{
    using namespace cadpred;
    PipelineConfig c;
    c.out = argc > 1 ? argv[1] : "quickstart_run";
    c.seed = 11;
    SynthConfig s;
    s.n_rows = 600;
    s.n_metabolites = 48;
    s.seed = 11;
    c.synth = s;
    c.impute.m_imputations = 2;
    c.lasso.n_folds = 5;
    c.rf.forest.n_trees = 200;
    c.rf.tuning.tune_trees = 100;

    try {
        RunOptions opt;
        opt.on_stage = [](const std::string& stage, double secs) {
            std::cerr << stage << ": " << secs << " s\n";
        };
        const auto manifest = run_pipeline(c, opt);
        std::cout << textio::read_file(c.out / "table2.txt");
        std::cout << "outputs in " << c.out.string() << " (config " << manifest.at("config_hash").get<std::string>()
                  << ")\n";
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
