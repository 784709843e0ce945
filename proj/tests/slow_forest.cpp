// Slow suite: the tuned forest finalized at 5000 trees on the default
// synthetic cohort with five imputations.
//
//   slow_forest [threads]

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <unistd.h>

#include "cadpred/cadpred.hpp"

int main(int argc, char** argv)
{
    using namespace cadpred;
    namespace fs = std::filesystem;
    PipelineConfig c;
    c.out = fs::temp_directory_path() / ("cadpred_slow_" + std::to_string(::getpid()));
    c.seed = 5000;
    c.threads = argc > 1 ? static_cast<unsigned>(std::atoi(argv[1])) : 8;
    SynthConfig sc;
    sc.seed = 5000;
    c.synth = sc;
    c.impute.m_imputations = 5;
    c.families = {Family::Forest};
    c.rf.tune = true;
    c.rf.tuning.tune_trees = 200;
    c.rf.forest.n_trees = 5000;

    const auto t0 = std::chrono::steady_clock::now();
    int status = 0;
    try {
        RunOptions opt;
        opt.on_stage = [](const std::string& stage, double secs) { std::cout << stage << ": " << secs << " s\n"; };
        run_pipeline(c, opt);
        std::cout << textio::read_file(c.out / "table2.txt");
        const auto report = nlohmann::json::parse(textio::read_file(c.out / "report.json"));
        for (const auto& m : report.at("models"))
            if (m.at("auc").is_null() || m.at("auc").get<double>() <= 0.5)
                status = 1;
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        status = 1;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "total " << secs << " s\n";
    fs::remove_all(c.out);
    return status;
}
