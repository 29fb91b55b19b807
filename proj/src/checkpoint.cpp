#include "medt/checkpoint.hpp"

#include "medt/common.hpp"
#include "medt/error.hpp"

#include <bit>
#include <cstring>

namespace medt::model {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'E', 'D', 'T', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::string& out, T v)
{
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    Reader(const std::string& bytes, std::size_t end, std::string origin) : bytes_(bytes), end_(end), origin_(std::move(origin)) {}

    template <class T>
    T get()
    {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string str(std::size_t n)
    {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == end_; }

private:
    void need(std::size_t n) const
    {
        if (end_ - pos_ < n) throw IoError(origin_ + ": checkpoint record runs past end of file");
    }

    const std::string& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
    std::string origin_;
};

} // namespace

void to_json(json& j, const CheckpointMeta& m)
{
    j = {{"seed", m.seed},
         {"epoch", m.epoch},
         {"train_loss", m.train_loss},
         {"validation_loss", m.validation_loss},
         {"data_hash", m.data_hash},
         {"config_hash", m.config_hash},
         {"code_version", m.code_version}};
}

void from_json(const json& j, CheckpointMeta& m)
{
    m.seed = j.at("seed").get<std::uint64_t>();
    m.epoch = j.at("epoch").get<int>();
    m.train_loss = j.at("train_loss").get<double>();
    m.validation_loss = j.at("validation_loss").get<double>();
    m.data_hash = j.value("data_hash", "");
    m.config_hash = j.value("config_hash", "");
    m.code_version = j.value("code_version", "");
}

std::string serialize_checkpoint(const SequenceModel& m, const CheckpointMeta& meta)
{
    std::string out(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string doc = json{{"model", m.config()}, {"meta", meta}}.dump();
    put<std::uint64_t>(out, doc.size());
    out += doc;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.params().size()));
    for (const auto& p : m.params()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
        out += p.name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
        for (int d : p.value.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (double v : p.value.values()) put<float>(out, static_cast<float>(v));
    }
    put<std::uint64_t>(out, fnv1a64(out));
    return out;
}

LoadedModel parse_checkpoint(const std::string& bytes, const std::string& origin)
{
    constexpr std::size_t kMin = sizeof kMagic + 4 + 8 + 4 + 8;
    if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw IoError(origin + ": not a checkpoint file");
    }
    if (bytes.size() >= sizeof kMagic + 4) {
        std::uint32_t version = 0;
        std::memcpy(&version, bytes.data() + sizeof kMagic, 4);
        if (version > kCheckpointVersion) {
            throw UnsupportedVersionError(origin + ": checkpoint version " + std::to_string(version) +
                                          " is newer than supported version " + std::to_string(kCheckpointVersion));
        }
    }
    if (bytes.size() < kMin) throw ChecksumError(origin + ": truncated checkpoint");
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + body, 8);
    LoadedModel out;
    out.checksum = hex64(fnv1a64(std::string_view(bytes).substr(0, body)));
    if (stored != fnv1a64(std::string_view(bytes).substr(0, body))) throw ChecksumError(origin + ": checkpoint checksum mismatch");

    Reader r(bytes, body, origin);
    r.str(sizeof kMagic);
    r.get<std::uint32_t>();
    const auto doc_len = r.get<std::uint64_t>();
    json doc;
    ModelConfig config;
    try {
        doc = json::parse(r.str(static_cast<std::size_t>(doc_len)));
        config = doc.at("model").get<ModelConfig>();
        out.meta = doc.at("meta").get<CheckpointMeta>();
    } catch (const json::exception& e) {
        throw IoError(origin + ": bad checkpoint config: " + e.what());
    }
    SequenceModel model(config, 0);
    const auto count = r.get<std::uint32_t>();
    if (count != model.params().size()) {
        throw IoError(origin + ": checkpoint holds " + std::to_string(count) + " parameters, model expects " +
                      std::to_string(model.params().size()));
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.get<std::uint32_t>());
        auto* p = model.params().find(name);
        if (!p) throw IoError(origin + ": unexpected parameter " + name);
        const auto rank = r.get<std::uint32_t>();
        Shape shape;
        for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<int>(r.get<std::uint32_t>()));
        if (shape != p->value.shape()) {
            throw IoError(origin + ": parameter " + name + " has shape " + shape_str(shape) + ", model expects " + shape_str(p->value.shape()));
        }
        for (std::size_t k = 0; k < p->value.size(); ++k) p->value[k] = static_cast<double>(r.get<float>());
    }
    if (!r.done()) throw IoError(origin + ": trailing bytes after parameter records");
    out.model = std::move(model);
    return out;
}

std::string save_checkpoint(const SequenceModel& m, const CheckpointMeta& meta, const std::string& path)
{
    const std::string bytes = serialize_checkpoint(m, meta);
    write_file(path, bytes);
    return hex64(fnv1a64(std::string_view(bytes).substr(0, bytes.size() - 8)));
}

LoadedModel load_checkpoint(const std::string& path)
{
    return parse_checkpoint(read_file(path), path);
}

} // namespace medt::model
