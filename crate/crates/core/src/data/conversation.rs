use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

/// Ordered role-tagged messages, serialized as `{"messages":[{"role","content"},…]}`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub messages: Vec<Message>,
}

impl Conversation {
    pub fn new(messages: Vec<Message>) -> Self {
        Self { messages }
    }

    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }

    pub fn count(&self, role: Role) -> usize {
        self.messages.iter().filter(|m| m.role == role).count()
    }

    pub fn last(&self) -> Option<&Message> {
        self.messages.last()
    }

    /// Roles strictly alternate user/assistant after an optional leading
    /// system message, starting with the user.
    pub fn role_flow_ok(&self) -> bool {
        let mut msgs = self.messages.iter().peekable();
        if msgs.peek().map(|m| m.role) == Some(Role::System) {
            msgs.next();
        }
        let mut expected = Role::User;
        let mut any = false;
        for m in msgs {
            if m.role != expected {
                return false;
            }
            any = true;
            expected = match expected {
                Role::User => Role::Assistant,
                _ => Role::User,
            };
        }
        any
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let c = Conversation::new(vec![Message::user("hi"), Message::assistant("yo")]);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(
            s,
            r#"{"messages":[{"role":"user","content":"hi"},{"role":"assistant","content":"yo"}]}"#
        );
    }

    #[test]
    fn role_flow() {
        let ok = Conversation::new(vec![
            Message::new(Role::System, "s"),
            Message::user("a"),
            Message::assistant("b"),
        ]);
        assert!(ok.role_flow_ok());
        let swapped = Conversation::new(vec![Message::assistant("b"), Message::user("a")]);
        assert!(!swapped.role_flow_ok());
        let doubled = Conversation::new(vec![Message::user("a"), Message::user("b")]);
        assert!(!doubled.role_flow_ok());
    }
}
