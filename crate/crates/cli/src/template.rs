//! Experiment config files: the commented template and the parser that
//! accepts it back.

use fedsilo_core::{ExperimentConfig, FieldError};

const COMMENTS: &[(&str, &str)] = &[
    ("experiment_id", "leave empty to let the server assign an id"),
    ("federation_id", "federation the experiment runs in"),
    ("name", "free-form label shown in reports"),
    ("algorithm", "FedAvg, FedAvgM, FedAdagrad, FedAdam, FedYogi, FedAsync or FedBuff"),
    ("model_spec", "logistic_regression, mlp or cnn2; init_seed fixes the initial global model"),
    ("loss", "cross_entropy or mse"),
    ("rounds", "global rounds (async: number of aggregations)"),
    ("local_epochs", "local passes over each client's training split per task"),
    ("batch_size", "local mini-batch size"),
    ("client_lr", "client learning rate in round 1"),
    ("lr_decay", "round r uses client_lr * lr_decay^(r-1)"),
    ("aggregator_hyper", "server optimizer settings; server_momentum is the FedAvgM beta"),
    ("privacy", "mechanism none or laplace (with epsilon per round and clip_norm)"),
    ("roster", "endpoint ids taking part; see `fedsilo endpoints list`"),
    ("quorum_fraction", "share of the roster a synchronous round waits for"),
    ("round_timeout_s", "longest a round waits for results"),
    ("seed", "fixes every client's batch order"),
];

/// The MNIST use case as a commented JSON file. `//` lines are comments.
pub fn commented_template(federation_id: &str, roster: Vec<String>) -> String {
    let mut config = ExperimentConfig::template(federation_id, roster);
    config.aggregator_hyper.server_momentum = 0.9;
    let json = serde_json::to_string_pretty(&config).expect("template serializes");
    let mut out = String::from(
        "// fedsilo experiment config: ten rounds of FedAvg over five MNIST sites.\n// Lines starting with // are ignored.\n",
    );
    for line in json.lines() {
        let key = line
            .strip_prefix("  \"")
            .and_then(|rest| rest.split_once('"'))
            .map(|(k, _)| k);
        if let Some(comment) = key.and_then(|k| COMMENTS.iter().find(|(name, _)| *name == k)) {
            out.push_str(&format!("  // {}\n", comment.1));
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Blanks out `//` comment lines, keeping line numbers intact.
pub fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|l| if l.trim_start().starts_with("//") { "" } else { l })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses and checks a config file. Errors name the offending fields.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Vec<FieldError>> {
    let stripped = strip_comments(text);
    let mut de = serde_json::Deserializer::from_str(&stripped);
    let config: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let field = if inner.is_data() && path != "." {
            path
        } else {
            inner
                .to_string()
                .split('`')
                .nth(1)
                .filter(|_| inner.is_data())
                .unwrap_or("config")
                .to_string()
        };
        vec![FieldError::new(field, inner.to_string())]
    })?;
    let errors = config.validate();
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(errors)
    }
}
