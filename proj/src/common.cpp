#include "latentsub/common.hpp"

namespace latentsub {

std::string_view to_string(OutputMode mode)
{
    return mode == OutputMode::Probability ? "probability" : "label_only";
}

std::string_view to_string(Stage stage)
{
    switch (stage) {
    case Stage::Stage1: return "stage1";
    case Stage::Stage2: return "stage2";
    case Stage::Eval: return "eval";
    }
    return "unknown";
}

OutputMode parse_output_mode(std::string_view text)
{
    if (text == "probability" || text == "prob" || text == "PROBABILITY")
        return OutputMode::Probability;
    if (text == "label_only" || text == "label-only" || text == "label" || text == "LABEL_ONLY")
        return OutputMode::LabelOnly;
    throw ConfigError("unknown output mode '" + std::string(text) + "'");
}

Stage parse_stage(std::string_view text)
{
    if (text == "stage1") return Stage::Stage1;
    if (text == "stage2") return Stage::Stage2;
    if (text == "eval") return Stage::Eval;
    throw ConfigError("unknown stage '" + std::string(text) + "'");
}

namespace {
std::uint64_t splitmix(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
} // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c)
{
    std::uint64_t h = splitmix(seed);
    h = splitmix(h ^ a);
    h = splitmix(h ^ (b + 0x632be59bd9b4e019ULL));
    h = splitmix(h ^ (c + 0x85157af5ULL));
    return h;
}

} // namespace latentsub
