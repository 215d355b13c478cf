// Scripted caption generator speaking the generator protocol on stdio.
// Stands in for a real model server in tests and demos.

#include <cstdint>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "haloprobe/error.hpp"
#include "haloprobe/protocol.hpp"
#include "haloprobe/synth.hpp"

int main(int argc, char** argv) {
    using namespace haloprobe;

    CLI::App app{"haloprobe-mockgen: scripted generator over stdin/stdout"};
    app.option_defaults()->always_capture_default();
    std::string spec_name = "separated";
    std::uint64_t seed = 0;
    std::string truth_list;
    ScriptedGenerator::Options options;
    app.add_option("--spec", spec_name, "Emission model: a preset name or a JSON spec file");
    app.add_option("--seed", seed, "Sampling seed");
    app.add_option("--truth", truth_list, "Comma-separated ground-truth categories")->required();
    app.add_option("--target-length", options.target_length, "Caption length at which candidates end");
    app.add_option("--max-objects", options.max_objects_per_segment, "Objects per segment at most");
    app.add_option("--halluc-rate", options.halluc_rate, "Chance that an object is outside the truth set");
    CLI11_PARSE(app, argc, argv);

    try {
        std::set<std::string> truth;
        std::istringstream in(truth_list);
        for (std::string c; std::getline(in, c, ',');) {
            if (!c.empty()) truth.insert(c);
        }
        ScriptedGenerator generator(load_generator_spec(spec_name), truth, seed, options);
        std::ios::sync_with_stdio(false);
        serve(generator, std::cin, std::cout);
    } catch (const Error& e) {
        std::cerr << "haloprobe-mockgen: " << e.what() << '\n';
        return exit_code(e.kind());
    }
    return 0;
}
