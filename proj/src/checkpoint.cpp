#include "abft/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "abft/config.hpp"

namespace abft {

namespace {

void put_u16(std::string& buf, uint16_t v) {
    for (int i = 0; i < 2; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& buf, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

class Reader {
  public:
    Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

    size_t pos() const { return pos_; }

    uint16_t u16() { return static_cast<uint16_t>(bytes(2)); }
    uint32_t u32() { return static_cast<uint32_t>(bytes(4)); }
    uint64_t u64() { return bytes(8); }
    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string text(size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void expect_end() const {
        if (pos_ != data_.size()) throw DataError(path_ + ": trailing bytes after checkpoint");
    }

  private:
    uint64_t bytes(int n) {
        need(static_cast<size_t>(n));
        uint64_t v = 0;
        for (int i = 0; i < n; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += static_cast<size_t>(n);
        return v;
    }
    void need(size_t n) const {
        if (pos_ + n > data_.size()) throw DataError(path_ + ": truncated checkpoint");
    }

    const std::string& data_;
    std::string path_;
    size_t pos_ = 0;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

// parses header + tensor records; payload checksum verified before returning
struct Parsed {
    uint32_t version = 0;
    std::string config_text;
    std::vector<std::vector<int>> shapes;
    std::vector<std::vector<float>> tensors;
};

Parsed parse_file(const std::string& path, bool want_data) {
    const std::string data = read_file(path);
    if (data.size() < 12 || std::memcmp(data.data(), kCheckpointMagic, 8) != 0)
        throw DataError(path + ": bad magic, not a checkpoint");
    Reader r(data, path);
    r.text(8);  // magic
    Parsed parsed;
    parsed.version = r.u32();
    if (parsed.version != kCheckpointVersion)
        throw DataError(path + ": version mismatch: file has " + std::to_string(parsed.version) +
                        ", supported is " + std::to_string(kCheckpointVersion));

    const size_t payload_begin = r.pos();
    if (data.size() < payload_begin + 8) throw DataError(path + ": truncated checkpoint");
    const size_t checksum_at = data.size() - 8;
    if (checksum_at < payload_begin) throw DataError(path + ": truncated checkpoint");
    const uint64_t want = fnv1a64(data.data() + payload_begin, checksum_at - payload_begin);

    const uint64_t config_len = r.u64();
    parsed.config_text = r.text(config_len);

    while (r.pos() < checksum_at) {
        const uint16_t rank = r.u16();
        if (rank < 1 || rank > 2) throw DataError(path + ": corrupt tensor rank");
        std::vector<int> shape;
        int64_t count = 1;
        for (int i = 0; i < rank; ++i) {
            const uint64_t extent = r.u64();
            if (extent == 0 || extent > (1u << 30)) throw DataError(path + ": corrupt extent");
            shape.push_back(static_cast<int>(extent));
            count *= static_cast<int64_t>(extent);
        }
        if (r.pos() + static_cast<size_t>(count) * 4 > checksum_at)
            throw DataError(path + ": truncated checkpoint");
        std::vector<float> values;
        if (want_data) {
            values.resize(static_cast<size_t>(count));
            for (auto& v : values) v = r.f32();
        } else {
            r.text(static_cast<size_t>(count) * 4);
        }
        parsed.shapes.push_back(std::move(shape));
        parsed.tensors.push_back(std::move(values));
    }

    Reader tail(data, path);
    tail.text(checksum_at);
    const uint64_t got = tail.u64();
    if (got != want) throw DataError(path + ": checksum mismatch");
    return parsed;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const std::string& config_text) {
    std::string buf;
    buf.append(kCheckpointMagic, 8);
    put_u32(buf, kCheckpointVersion);
    const size_t payload_begin = buf.size();
    put_u64(buf, config_text.size());
    buf += config_text;
    for (const auto& p : model.parameters()) {
        put_u16(buf, static_cast<uint16_t>(p->shape.size()));
        for (int e : p->shape) put_u64(buf, static_cast<uint64_t>(e));
        for (float v : p->data) put_f32(buf, v);
    }
    put_u64(buf, fnv1a64(buf.data() + payload_begin, buf.size() - payload_begin));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("failed writing checkpoint " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    Parsed parsed = parse_file(path, /*want_data=*/true);
    ExperimentConfig cfg = parse_config(parsed.config_text);
    cfg.model.validate();

    LoadedCheckpoint loaded;
    loaded.config_text = parsed.config_text;
    loaded.model = init_model<float>(cfg.model);
    auto params = loaded.model.parameters();
    if (params.size() != parsed.tensors.size())
        throw DataError(path + ": tensor count does not match the embedded architecture");
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape != parsed.shapes[i])
            throw DataError(path + ": tensor shape mismatch at index " + std::to_string(i));
        params[i]->data = std::move(parsed.tensors[i]);
    }
    return loaded;
}

CheckpointInfo inspect_checkpoint(const std::string& path) {
    Parsed parsed = parse_file(path, /*want_data=*/false);
    CheckpointInfo info;
    info.version = parsed.version;
    info.config_text = parsed.config_text;
    info.tensor_shapes = parsed.shapes;
    for (const auto& s : parsed.shapes) {
        int64_t n = 1;
        for (int e : s) n *= e;
        info.total_parameters += n;
    }
    return info;
}

}  // namespace abft
