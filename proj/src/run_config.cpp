#include "funet/run_config.hpp"

#include <fstream>

#include "funet/data_io.hpp"

namespace funet {

void RunConfig::validate() const
{
    model.validate(variant);
    train.validate();
    if (threads < 0) throw std::invalid_argument("threads must be nonnegative");
    split_counts(1, data.ratios);  // rejects negative or all-zero ratios
}

nlohmann::json to_json(const RunConfig& c)
{
    return {{"model", to_json(c.model)},
            {"train", to_json(c.train)},
            {"data", {{"ratios", c.data.ratios}, {"split_seed", c.data.split_seed}, {"foreground_only", c.data.foreground_only}}},
            {"variant", variant_tag(c.variant)},
            {"deterministic", c.deterministic},
            {"threads", c.threads}};
}

RunConfig run_config_from_json(const nlohmann::json& j)
{
    if (!j.is_object()) throw std::invalid_argument("run config must be a JSON object");
    RunConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "model") c.model = funet_config_from_json(v);
            else if (key == "train") c.train = train_config_from_json(v);
            else if (key == "data") {
                if (!v.is_object()) throw std::invalid_argument("data must be an object");
                for (const auto& [k, d] : v.items()) {
                    if (k == "ratios") c.data.ratios = d.get<std::array<double, 3>>();
                    else if (k == "split_seed") c.data.split_seed = d.get<std::uint64_t>();
                    else if (k == "foreground_only") c.data.foreground_only = d.get<bool>();
                    else throw std::invalid_argument("unknown data config key '" + k + "'");
                }
            } else if (key == "variant") c.variant = parse_variant(v.get<std::string>());
            else if (key == "deterministic") c.deterministic = v.get<bool>();
            else if (key == "threads") c.threads = v.get<int>();
            else throw std::invalid_argument("unknown run config key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("run config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig read_run_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("cannot parse " + path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace funet
