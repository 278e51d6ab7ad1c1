//! Identifier newtypes and small value types shared by every layer.

use std::fmt;

macro_rules! ident_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}

ident_newtype!(
    /// A user's identity; stands in for the public key that authenticates a connection.
    Principal
);
ident_newtype!(
    /// Geographic region a session connects from.
    Region
);
ident_newtype!(
    /// Name of a metadata list (friends list, blacklist, ...).
    ListId
);
ident_newtype!(
    /// A conduit class: a named group of conduits that share one policy.
    ClassId
);
ident_newtype!(
    /// A concrete conduit: file path, pipe id, key-value key or connection id.
    ConduitId
);
ident_newtype!(
    /// An offline-analyzed task instance (`worker_alice`, `indexer`, ...).
    TaskId
);

/// Returns true if `s` is usable as a plain identifier in policy text, manifests
/// and the analyzer output format.
pub fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-' | '@'))
}

/// Direction of an access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AccessMode {
    Read,
    Write,
}

impl AccessMode {
    pub fn rights(self) -> Rights {
        match self {
            AccessMode::Read => Rights::READ,
            AccessMode::Write => Rights::WRITE,
        }
    }
}

impl fmt::Display for AccessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessMode::Read => "read",
            AccessMode::Write => "write",
        })
    }
}

/// Read / write / read-write access rights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Rights(u8);

impl Rights {
    pub const NONE: Rights = Rights(0);
    pub const READ: Rights = Rights(1);
    pub const WRITE: Rights = Rights(2);
    pub const READ_WRITE: Rights = Rights(3);

    pub fn union(self, other: Rights) -> Rights {
        Rights(self.0 | other.0)
    }

    pub fn covers(self, wanted: Rights) -> bool {
        self.0 & wanted.0 == wanted.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Rights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.0 {
            0 => "-",
            1 => "r",
            2 => "w",
            _ => "rw",
        })
    }
}

/// Runtime handle of a sandboxed task (one light-weight context).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskHandle(pub u32);

impl fmt::Display for TaskHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifiers() {
        assert!(is_ident("bob.friends"));
        assert!(is_ident("blacklist.r1"));
        assert!(is_ident("u007"));
        assert!(!is_ident("X"));
        assert!(!is_ident("a:b"));
        assert!(!is_ident(""));
    }

    #[test]
    fn rights_union() {
        assert_eq!(Rights::READ.union(Rights::WRITE), Rights::READ_WRITE);
        assert!(Rights::READ_WRITE.covers(Rights::READ));
        assert!(!Rights::READ.covers(Rights::WRITE));
        assert_eq!(Rights::READ_WRITE.to_string(), "rw");
    }
}
