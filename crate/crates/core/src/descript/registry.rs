use std::collections::BTreeMap;

/// Registry shipped with the simulated fleet.
const FLEET_REGISTRY: &str = include_str!("../fleet/actions.registry");

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamKind {
    Int,
    Number,
    Word,
    /// A group name or node id.
    Node,
    OneOf(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandSpec {
    pub name: String,
    pub params: Vec<ParamSpec>,
    /// Metric names the command reports on success.
    pub emits: Vec<String>,
}

impl CommandSpec {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// The action vocabulary a fleet accepts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionRegistry {
    commands: BTreeMap<String, CommandSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("registry line {line}: {message}")]
pub struct RegistryError {
    pub line: usize,
    pub message: String,
}

impl ActionRegistry {
    /// Vocabulary of the simulated fleet.
    pub fn fleet() -> Self {
        Self::parse(FLEET_REGISTRY).expect("bundled registry is well-formed")
    }

    pub fn parse(text: &str) -> Result<Self, RegistryError> {
        let mut commands = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |message: String| RegistryError {
                line: idx + 1,
                message,
            };
            let (decl, emits) = match line.split_once("=>") {
                Some((d, e)) => (d, e.split_whitespace().map(str::to_string).collect()),
                None => (line, Vec::new()),
            };
            let mut words = decl.split_whitespace();
            let name = words.next().ok_or_else(|| fail("missing command name".into()))?;
            let mut params = Vec::new();
            for word in words {
                let (required, word) = match word.strip_prefix('?') {
                    Some(w) => (false, w),
                    None => (true, word),
                };
                let (pname, kind) = word
                    .split_once(':')
                    .ok_or_else(|| fail(format!("parameter `{word}` needs a type")))?;
                let kind = match kind {
                    "int" => ParamKind::Int,
                    "number" => ParamKind::Number,
                    "word" => ParamKind::Word,
                    "node" => ParamKind::Node,
                    alts if alts.contains('|') => {
                        ParamKind::OneOf(alts.split('|').map(str::to_string).collect())
                    }
                    other => return Err(fail(format!("unknown parameter type `{other}`"))),
                };
                params.push(ParamSpec {
                    name: pname.to_string(),
                    kind,
                    required,
                });
            }
            let spec = CommandSpec {
                name: name.to_string(),
                params,
                emits,
            };
            if commands.insert(name.to_string(), spec).is_some() {
                return Err(fail(format!("command `{name}` declared twice")));
            }
        }
        Ok(Self { commands })
    }

    pub fn get(&self, command: &str) -> Option<&CommandSpec> {
        self.commands.get(command)
    }

    pub fn commands(&self) -> impl Iterator<Item = &CommandSpec> {
        self.commands.values()
    }
}

impl Default for ActionRegistry {
    fn default() -> Self {
        Self::fleet()
    }
}
