#include "funet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "funet/data_io.hpp"

namespace funet {

namespace {

void put_u32(std::string& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_string(std::string& out, const std::string& s)
{
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : b_(bytes) {}

    const char* take(std::size_t n)
    {
        if (n > b_.size() - pos_) throw CheckpointError("checkpoint truncated");
        const char* p = b_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::uint32_t u32()
    {
        const auto* p = reinterpret_cast<const unsigned char*>(take(4));
        return p[0] | p[1] << 8 | p[2] << 16 | static_cast<std::uint32_t>(p[3]) << 24;
    }
    std::uint16_t u16()
    {
        const auto* p = reinterpret_cast<const unsigned char*>(take(2));
        return static_cast<std::uint16_t>(p[0] | p[1] << 8);
    }
    std::string str()
    {
        const auto n = u32();
        return std::string(take(n), n);
    }
    bool done() const { return pos_ == b_.size(); }

private:
    const std::string& b_;
    std::size_t pos_ = 0;
};

nlohmann::json parse_json(const std::string& s, const char* what)
{
    try {
        return nlohmann::json::parse(s);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint ") + what + " is not valid JSON: " + e.what());
    }
}

}  // namespace

nlohmann::json model_fingerprint(const FUnetConfig& cfg, Variant variant)
{
    return {{"model", to_json(cfg)}, {"variant", variant_tag(variant)}};
}

std::string serialize_checkpoint(const Checkpoint& ckpt)
{
    std::string out = "FUNT";
    out.push_back(static_cast<char>(Checkpoint::kVersion & 0xff));
    out.push_back(static_cast<char>(Checkpoint::kVersion >> 8));
    put_string(out, ckpt.fingerprint.dump());
    put_string(out, ckpt.run_config.dump());
    put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        put_string(out, name);
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
        for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

Checkpoint parse_checkpoint(const std::string& bytes)
{
    Reader r(bytes);
    if (std::memcmp(r.take(4), "FUNT", 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
    const auto version = r.u16();
    if (version != Checkpoint::kVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint c;
    c.fingerprint = parse_json(r.str(), "fingerprint");
    c.run_config = parse_json(r.str(), "run config");
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name = r.str();
        const auto rank = r.u32();
        if (rank > 8) throw CheckpointError("tensor " + name + " has implausible rank " + std::to_string(rank));
        Shape shape;
        std::size_t numel = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            shape.push_back(r.u32());
            numel *= static_cast<std::size_t>(shape.back());
        }
        if (numel > (bytes.size() / 4)) throw CheckpointError("tensor " + name + " larger than the file");
        std::vector<float> values(numel);
        for (auto& v : values) v = std::bit_cast<float>(r.u32());
        c.tensors.emplace_back(std::move(name), Tensor::from_vector(std::move(shape), std::move(values)));
    }
    if (!r.done()) throw CheckpointError("trailing bytes after the tensor table");
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    const auto bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("cannot write " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return parse_checkpoint(s.str());
}

Checkpoint make_checkpoint(const FUnet<float>& model, nlohmann::json run_config)
{
    Checkpoint c;
    c.fingerprint = model_fingerprint(model.config(), model.variant());
    c.run_config = std::move(run_config);
    for (const auto& [name, t] : model.params().items()) c.tensors.emplace_back(name, t.detach());
    return c;
}

void load_parameters(FUnet<float>& model, const Checkpoint& ckpt)
{
    const auto expected = model_fingerprint(model.config(), model.variant());
    if (ckpt.fingerprint != expected) {
        throw CheckpointError("checkpoint fingerprint " + ckpt.fingerprint.dump() + " does not match model " +
                              expected.dump());
    }
    const auto& items = model.params().items();
    if (items.size() != ckpt.tensors.size()) {
        throw CheckpointError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                              std::to_string(items.size()));
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& [name, t] = ckpt.tensors[i];
        auto p = items[i].second;
        if (name != items[i].first || t.shape() != p.shape()) {
            throw CheckpointError("checkpoint tensor " + name + " " + shape_str(t.shape()) + " does not match " +
                                  items[i].first + " " + shape_str(p.shape()));
        }
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto p = items[i].second;
        const auto src = ckpt.tensors[i].second.data();
        std::copy(src.begin(), src.end(), p.mutable_data().begin());
    }
}

FUnet<float> model_from_checkpoint(const Checkpoint& ckpt)
{
    FUnetConfig cfg;
    Variant variant;
    try {
        cfg = funet_config_from_json(ckpt.fingerprint.at("model"));
        variant = parse_variant(ckpt.fingerprint.at("variant").get<std::string>());
        cfg.validate(variant);
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint fingerprint is unusable: ") + e.what());
    }
    FUnet<float> model(cfg, variant, 0);
    load_parameters(model, ckpt);
    return model;
}

}  // namespace funet
