#include "crashsev/nn/checkpoint.hpp"

#include "json.hpp"

#include "crashsev/util.hpp"

namespace crashsev::nn {

using nlohmann::json;

namespace {

json spec_json(const ModelSpec& s) {
    return {{"variant", variant_name(s.variant)}, {"embed_width", s.embed_width}, {"n_state", s.n_state},
            {"dt_rank", s.dt_rank},               {"conv_kernel", s.conv_kernel}, {"heads", s.heads},
            {"hidden", s.hidden},                 {"dropout", s.dropout},         {"n_classes", s.n_classes},
            {"column_group", s.column_group}};
}

ModelSpec spec_from(const json& j) {
    ModelSpec s;
    s.variant = parse_variant(j.at("variant").get<std::string>());
    s.embed_width = j.at("embed_width");
    s.n_state = j.at("n_state");
    s.dt_rank = j.at("dt_rank");
    s.conv_kernel = j.at("conv_kernel");
    s.heads = j.at("heads");
    s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    s.dropout = j.at("dropout");
    s.n_classes = j.at("n_classes");
    s.column_group = j.at("column_group").get<std::vector<int>>();
    return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, SsmClassifier<float>& model, const CheckpointInfo& info) {
    json params = json::array();
    for (Parameter<float>* p : model.parameters())
        params.push_back({{"name", p->name}, {"shape", p->value.shape}, {"values", p->value.data}});
    json j = {{"version", kCheckpointVersion},
              {"kind", "ssm_classifier"},
              {"spec", spec_json(model.spec())},
              {"preprocess_hash", info.preprocess_hash},
              {"features", info.features},
              {"parameters", params}};
    write_text_file(path, j.dump(1));
}

std::unique_ptr<SsmClassifier<float>> load_checkpoint(const std::filesystem::path& path,
                                                      const std::string& expected_hash, CheckpointInfo* info) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw data_error("checkpoint " + path.string() + " is not valid JSON: " + e.what());
    }
    try {
        if (j.at("version").get<int>() != kCheckpointVersion)
            throw data_error("unsupported checkpoint version in " + path.string());
        const std::string hash = j.at("preprocess_hash");
        if (!expected_hash.empty() && hash != expected_hash)
            throw data_error("checkpoint " + path.string() + " was trained against preprocessing state " + hash +
                             ", current state is " + expected_hash);
        auto model = std::make_unique<SsmClassifier<float>>(spec_from(j.at("spec")));
        const json& params = j.at("parameters");
        std::size_t matched = 0;
        for (const json& pj : params) {
            Parameter<float>* p = model->find(pj.at("name").get<std::string>());
            if (!p) throw data_error("checkpoint has unknown parameter " + pj.at("name").get<std::string>());
            if (pj.at("shape").get<std::vector<std::size_t>>() != p->value.shape)
                throw data_error("checkpoint parameter " + p->name + " has the wrong shape");
            p->value.data = pj.at("values").get<std::vector<float>>();
            if (p->value.data.size() != p->value.size() || !p->value.all_finite())
                throw data_error("checkpoint parameter " + p->name + " is malformed");
            ++matched;
        }
        if (matched != model->parameters().size()) throw data_error("checkpoint is missing parameters");
        model->mark_initialized();
        if (info) {
            info->preprocess_hash = hash;
            info->features = j.at("features").get<std::vector<std::string>>();
        }
        return model;
    } catch (const json::exception& e) {
        throw data_error("checkpoint " + path.string() + " is malformed: " + e.what());
    }
}

}  // namespace crashsev::nn
